use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use acdc::formats::{self, MatrixKind};
use acdc::scenario::{load_scenario, metrics_report, write_trace, StdClock};
use acdc::load_grid;
use acdc_core::controller::{ControlConfig, Controller, Setpoints};
use acdc_core::sensitivity::{all_variables, ControlVariable, VarKind};
use acdc_core::simulator::{generate_profiles, run_observed, ProfileTemplate};
use acdc_core::{solve_pf, GridModel, SensitivityBundle};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "acdc", version, about = "Hybrid AC/DC power flow, sensitivities and real-time control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the power flow of a grid for a specification file.
    Pf {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// State CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sensitivity coefficients around a state.
    Sc {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        state: PathBuf,
        /// `all`, or a comma-separated list such as `P@B03,Q@B15,E@B19`.
        #[arg(long, default_value = "all")]
        vars: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// One control step for a measured state.
    Opf {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        t: usize,
        /// Controller configuration (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Setpoints in force at `t` (JSON); nominal when omitted.
        #[arg(long)]
        setpoints: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop replay of a scenario.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Pace the loop to the control period.
        #[arg(long)]
        realtime: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Synthetic profiles from a template.
    GenProfiles {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Admittance matrix as CSV.
    Matrix {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, value_enum, default_value_t = Which::Unified)]
        which: Which,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Unified,
    Ac,
    Dc,
}

fn parse_vars(model: &GridModel, spec: &str) -> Result<Vec<ControlVariable>> {
    if spec.trim() == "all" {
        return Ok(all_variables(model));
    }
    spec.split(',')
        .map(|item| {
            let item = item.trim();
            let (kind, id) = item.split_once('@').with_context(|| format!("`{item}` is not KIND@NODE"))?;
            let kind = match kind {
                "P" => VarKind::P,
                "Q" => VarKind::Q,
                "E" | "V" => VarKind::V,
                other => bail!("unknown variable kind `{other}`"),
            };
            let node = model.node_index(id).with_context(|| format!("unknown node `{id}`"))?;
            let v = ControlVariable::new(kind, node);
            v.validate(model)?;
            Ok(v)
        })
        .collect()
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pf { grid, spec, out } => {
            let model = load_grid(&grid)?;
            let spec = formats::load_spec(&model, &spec)?;
            let sol = solve_pf(&model, &spec, None)?;
            eprintln!(
                "converged in {} iterations, max mismatch {:.3e}",
                sol.iterations, sol.max_mismatch
            );
            match out {
                Some(path) => formats::save_state(&model, &sol.state, &path)?,
                None => formats::write_state(&model, &sol.state, std::io::stdout().lock())?,
            }
        }
        Command::Sc { grid, state, vars, out } => {
            let model = load_grid(&grid)?;
            let state = formats::load_state(&model, &state)?;
            let vars = parse_vars(&model, &vars)?;
            let bundle = SensitivityBundle::compute(&model, &state, &vars)?;
            eprintln!("condition estimate {:.3e}", bundle.voltage.condition);
            formats::write_sc(&model, &bundle, fs::File::create(&out)?)?;
        }
        Command::Opf {
            grid,
            state,
            profiles,
            t,
            config,
            setpoints,
            out,
        } => {
            let model = load_grid(&grid)?;
            let state = formats::load_state(&model, &state)?;
            let profile = formats::load_profile(&model, &profiles)?;
            let config: ControlConfig = match config {
                Some(p) => formats::read_json(&p)?,
                None => ControlConfig::default(),
            };
            let initial: Setpoints = match setpoints {
                Some(p) => formats::read_json(&p)?,
                None => Setpoints::nominal(&model),
            };
            let clock = StdClock::new();
            let decision = Controller::new(&model, config, initial).step(&state, &profile, t, &clock);
            if let Some(msg) = &decision.message {
                eprintln!("step held: {msg}");
            }
            formats::write_json(&decision, &out)?;
        }
        Command::Sim {
            scenario,
            seed,
            realtime,
            out,
            metrics,
        } => {
            let loaded = load_scenario(&scenario, seed)?;
            let clock = StdClock::new();
            let period = Duration::from_secs_f64(loaded.scenario.period_s);
            let start = Instant::now();
            let mut pace = |s: usize| {
                if realtime {
                    let due = start + period * (s as u32 + 1);
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        std::thread::sleep(wait);
                    }
                }
            };
            let trace = run_observed(&loaded.model, &loaded.profile, &loaded.scenario, &clock, &mut pace)?;
            write_trace(&loaded.model, &trace, fs::File::create(&out)?)?;
            let report = metrics_report(&loaded.model, &trace);
            formats::write_json(&report, &metrics)?;
            let m = &report.metrics;
            eprintln!(
                "{} steps, mean vm error {:.2e}, curtailed {:.3} kWh, slack Q rms {:.3} kvar, P100 {:.3} ms",
                m.steps,
                m.vm_error_mean,
                m.curtailed_energy_kwh,
                m.slack_q_rms_kvar,
                m.timing.p100_ns as f64 * 1e-6
            );
        }
        Command::GenProfiles {
            grid,
            template,
            seed,
            out,
        } => {
            let model = load_grid(&grid)?;
            let template: ProfileTemplate = formats::read_json(&template)?;
            let profile = generate_profiles(&model, seed, &template)?;
            formats::save_profile(&model, &profile, &out)?;
        }
        Command::Matrix { grid, which, out } => {
            let model = load_grid(&grid)?;
            let kind = match which {
                Which::Unified => MatrixKind::Unified,
                Which::Ac => MatrixKind::Ac,
                Which::Dc => MatrixKind::Dc,
            };
            formats::write_matrix(&model, kind, fs::File::create(&out)?)?;
        }
    }
    Ok(())
}
