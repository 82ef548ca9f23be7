//! Scenario files, trace CSV and metrics JSON.
//!
//! A scenario file extends the simulator settings with the grid and the
//! profile source, both resolved relative to the scenario file:
//!
//! ```json
//! { "grid": "epfl.json", "template": "epfl_profiles.json", "seed": 7, "horizon": 2130, "preroll": 100 }
//! ```
//!
//! `profiles` names a profile CSV instead; exactly one of the two is required.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use acdc_core::controller::{Clock, DecisionStatus};
use acdc_core::simulator::{generate_profiles, metrics, timing_cdf, Metrics, ProfileTemplate};
use acdc_core::{GridModel, ResourceProfile, Scenario, ScenarioTrace};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::formats::{load_profile, read_json};
use crate::grid_file::load_grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub grid: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiles: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    #[serde(flatten)]
    pub sim: Scenario,
}

/// Everything a closed-loop run needs.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub model: GridModel,
    pub profile: ResourceProfile,
    pub scenario: Scenario,
}

/// Loads a scenario file. `seed` overrides the file's seed; it drives both
/// profile generation and measurement noise.
pub fn load_scenario(path: &Path, seed: Option<u64>) -> Result<LoadedScenario> {
    let mut file: ScenarioFile = read_json(path)?;
    if let Some(s) = seed {
        file.sim.seed = s;
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let model = load_grid(&dir.join(&file.grid))?;
    let profile = match (&file.profiles, &file.template) {
        (Some(p), None) => load_profile(&model, &dir.join(p))?,
        (None, Some(t)) => {
            let template: ProfileTemplate = read_json(&dir.join(t))?;
            generate_profiles(&model, file.sim.seed, &template)
                .with_context(|| format!("generating profiles from {}", t.display()))?
        }
        _ => bail!("scenario {} needs exactly one of `profiles` and `template`", path.display()),
    };
    Ok(LoadedScenario {
        model,
        profile,
        scenario: file.sim,
    })
}

/// Monotonic wall clock for stage timing.
#[derive(Debug, Clone, Copy)]
pub struct StdClock {
    origin: Instant,
}

impl StdClock {
    pub fn new() -> Self {
        StdClock { origin: Instant::now() }
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

fn status_name(s: DecisionStatus) -> &'static str {
    match s {
        DecisionStatus::Optimal => "optimal",
        DecisionStatus::Relaxed => "relaxed",
        DecisionStatus::Held => "held",
    }
}

/// Long-format trace: `step, element, quantity, value`.
///
/// Wall-clock timings are left out so that identical runs give identical
/// files; they are summarized in the metrics instead.
pub fn write_trace<W: Write>(model: &GridModel, trace: &ScenarioTrace, out: W) -> Result<()> {
    let base = model.base;
    let kw = |pu: f64| base.pu_to_kw(pu);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "element", "quantity", "value"])?;
    for s in &trace.steps {
        let step = s.step.to_string();
        let mut put = |element: &str, quantity: &str, value: String| w.write_record([step.as_str(), element, quantity, &value]);
        let d = &s.decision;
        put("loop", "status", status_name(d.status).to_string())?;
        put("loop", "pf_iterations", s.pf_iterations.to_string())?;
        put("loop", "balance_error", s.balance_error.to_string())?;
        put("loop", "objective", d.objective.to_string())?;
        put("loop", "qp_iterations", d.qp_iterations.to_string())?;
        put("loop", "predicted_p_loss_kw", kw(d.predicted_p_loss).to_string())?;
        put("slack", "p_kw", kw(s.slack_p).to_string())?;
        put("slack", "q_kvar", kw(s.slack_q).to_string())?;
        for (u, id) in trace.node_ids.iter().enumerate() {
            let ac = u < s.state.e_ac.len();
            put(id, "vm", s.state.vm(u).to_string())?;
            if ac {
                put(id, "angle", s.state.e_ac[u].arg().to_string())?;
            }
            put(id, "p_kw", kw(s.state.p[u]).to_string())?;
            if ac {
                put(id, "q_kvar", kw(s.state.q[u]).to_string())?;
            }
            if let Some(e) = &s.vm_error {
                put(id, "vm_error", e[u].to_string())?;
            }
            if let Some(p) = d.predicted_vm.get(u) {
                put(id, "vm_predicted_next", p.to_string())?;
            }
        }
        for (k, id) in trace.line_ids.iter().enumerate() {
            put(id, "current_a", s.currents_a[k].to_string())?;
            if let Some(e) = &s.current_error {
                put(id, "current_error_a", model.current_to_amps(k, e[k]).to_string())?;
            }
        }
        for (k, id) in trace.dct_ids.iter().enumerate() {
            let r = &s.dct[k];
            put(id, "p1_kw", kw(r.p1).to_string())?;
            put(id, "p2_kw", kw(r.p2).to_string())?;
            put(id, "transfer_kw", kw(r.transfer).to_string())?;
            if let Some(t) = d.predicted_transfer.get(k) {
                put(id, "transfer_set_kw", kw(*t).to_string())?;
            }
        }
        for (id, p) in &s.pv_output {
            put(id, "output_kw", kw(*p).to_string())?;
            put(id, "mpp_kw", kw(s.pv_available[id]).to_string())?;
            if let Some(cap) = d.setpoints.pv_p.get(id) {
                put(id, "cap_set_kw", kw(*cap).to_string())?;
            }
        }
        for id in &trace.ic_ids {
            let ic = model.ic_pairs().iter().find(|ic| &ic.id == id).context("trace names an unknown converter")?;
            put(id, "p_ac_kw", kw(s.state.p[ic.ac]).to_string())?;
            put(id, "q_kvar", kw(s.state.q[ic.ac]).to_string())?;
            put(id, "e_dc", s.state.vm(ic.dc).to_string())?;
            if let Some(q) = d.setpoints.ic_q.get(id) {
                put(id, "q_set_kvar", kw(*q).to_string())?;
            }
            if let Some(e) = d.setpoints.ic_e.get(id) {
                put(id, "e_set", e.to_string())?;
            }
            if let Some(p) = d.setpoints.ic_p.get(id) {
                put(id, "p_set_kw", kw(*p).to_string())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn trace_csv(model: &GridModel, trace: &ScenarioTrace) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_trace(model, trace, &mut buf)?;
    Ok(buf)
}

/// Metrics file contents: the summary plus the full timing CDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    /// `(ns, fraction of steps at or below)`.
    pub timing_cdf: Vec<(u64, f64)>,
}

pub fn metrics_report(model: &GridModel, trace: &ScenarioTrace) -> MetricsReport {
    MetricsReport {
        metrics: metrics(model, trace),
        timing_cdf: timing_cdf(trace),
    }
}
