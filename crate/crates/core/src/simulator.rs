//! Closed-loop replay: nonlinear plant, profile playback and the controller
//! in the loop.
//!
//! Each step solves the plant power flow with the current profiles and the
//! setpoints decided one step earlier, hands the (optionally noisy) state to
//! the controller and records everything. The plant evaluates the DC
//! transformers with plant fidelity while the controller keeps its linear
//! model, which is the only intended source of model mismatch.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Clock, ControlConfig, ControlDecision, Controller, DecisionStatus, Setpoints, StageTimings};
use crate::devices::{Fidelity, ProfileSeries, ResourceProfile};
use crate::error::{DeviceError, PfError};
use crate::grid::{BranchCurrent, DeviceKind, GridModel, GridState, NodeKind};
use crate::power_flow::{solve_pf_with, PfOptions, PfSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    /// Recorded steps.
    pub horizon: usize,
    /// Control period in seconds.
    pub period_s: f64,
    /// Unrecorded steps run before the horizon with the profiles frozen at
    /// their first value, so that the loop starts from a settled state.
    pub preroll: usize,
    pub plant_fidelity: Fidelity,
    pub dct_deadband: bool,
    pub dct_enabled: bool,
    pub ic_losses: bool,
    /// Standard deviation of the Gaussian noise added to measured voltage
    /// magnitudes (p.u.).
    pub noise_sigma: f64,
    pub seed: u64,
    pub control: ControlConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            horizon: 1,
            period_s: 2.0,
            preroll: 0,
            plant_fidelity: Fidelity::Plant,
            dct_deadband: true,
            dct_enabled: true,
            ic_losses: true,
            noise_sigma: 0.0,
            seed: 0,
            control: ControlConfig::default(),
        }
    }
}

impl Scenario {
    /// The network as seen by both plant and controller.
    pub fn effective_model(&self, model: &GridModel) -> GridModel {
        let mut m = model.clone();
        if !self.ic_losses {
            m = m.without_ic_losses();
        }
        if !self.dct_enabled {
            m = m.without_dcts();
        }
        m
    }

    /// The network used by the plant: as [`Self::effective_model`], with the
    /// DCT deadband removed when disabled.
    pub fn plant_model(&self, model: &GridModel) -> GridModel {
        let m = self.effective_model(model);
        if self.dct_deadband {
            m
        } else {
            m.with_dct_deadband(0.0)
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Profile(#[from] DeviceError),
    #[error("plant power flow failed at step {step}: {source}")]
    PlantDiverged {
        step: usize,
        source: PfError,
        spec: PfSpec,
    },
}

/// Output of a DCT as measured on the plant (p.u.).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DctReading {
    pub p1: f64,
    pub p2: f64,
    pub transfer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub pf_iterations: usize,
    pub state: GridState,
    /// Line currents in amps: magnitude on AC lines, signed on DC lines.
    pub currents_a: Vec<f64>,
    pub dct: Vec<DctReading>,
    pub slack_p: f64,
    pub slack_q: f64,
    /// Output and available power of each curtailable PV plant.
    pub pv_output: BTreeMap<String, f64>,
    pub pv_available: BTreeMap<String, f64>,
    /// `generation − load − losses`, should vanish.
    pub balance_error: f64,
    /// Plant voltage magnitude minus the previous decision's prediction.
    pub vm_error: Option<Vec<f64>>,
    /// Plant line current (AC magnitude, DC signed, p.u.) minus prediction.
    pub current_error: Option<Vec<f64>>,
    pub decision: ControlDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTrace {
    pub node_ids: Vec<String>,
    pub line_ids: Vec<String>,
    pub ic_ids: Vec<String>,
    pub dct_ids: Vec<String>,
    pub period_s: f64,
    pub steps: Vec<StepRecord>,
}

/// Plant setpoints for step `t`: profile injections plus the resource setpoints.
pub fn plant_spec(
    model: &GridModel,
    profile: &ResourceProfile,
    t: usize,
    setpoints: &Setpoints,
    fidelity: Fidelity,
) -> Result<(PfSpec, BTreeMap<String, (f64, f64)>), DeviceError> {
    let mut spec = PfSpec::nominal(model);
    spec.dct_fidelity = fidelity;
    let mut pv = BTreeMap::new();
    for d in model.devices() {
        let (mut p, q) = profile.pq(&d.id, t)?;
        if let DeviceKind::Pv { curtailable } = d.kind {
            let mpp = match profile.pv_available(&d.id, t) {
                Ok(m) => m,
                Err(DeviceError::NoMpp(_)) => p,
                Err(e) => return Err(e),
            };
            p = mpp;
            if curtailable {
                let cap = setpoints.pv_p.get(&d.id).copied().unwrap_or(f64::INFINITY);
                p = mpp.min(cap).max(0.0);
                pv.insert(d.id.clone(), (p, mpp));
            }
        }
        let sp = &mut spec.nodes[d.node];
        sp.p = Some(sp.p.unwrap_or(0.0) + p);
        if model.is_ac(d.node) {
            sp.q = Some(sp.q.unwrap_or(0.0) + q);
        }
    }
    for ic in model.ic_pairs() {
        if let Some(q) = setpoints.ic_q.get(&ic.id) {
            spec.nodes[ic.ac].q = Some(*q);
        }
        if let Some(e) = setpoints.ic_e.get(&ic.id) {
            spec.nodes[ic.dc].v = Some(*e);
        }
        if let Some(p) = setpoints.ic_p.get(&ic.id) {
            spec.nodes[ic.ac].p = Some(*p);
        }
    }
    Ok((spec, pv))
}

/// Runs the closed loop. `model` is the full grid; the scenario flags derive
/// the plant and controller views from it.
pub fn run(
    model: &GridModel,
    profile: &ResourceProfile,
    scenario: &Scenario,
    clock: &dyn Clock,
) -> Result<ScenarioTrace, SimError> {
    run_observed(model, profile, scenario, clock, &mut |_| {})
}

/// As [`run`], calling `after_step` with the loop index (pre-roll included)
/// once each step is complete.
pub fn run_observed(
    model: &GridModel,
    profile: &ResourceProfile,
    scenario: &Scenario,
    clock: &dyn Clock,
    after_step: &mut dyn FnMut(usize),
) -> Result<ScenarioTrace, SimError> {
    if scenario.horizon == 0 || !(scenario.period_s > 0.0) {
        return Err(SimError::InvalidScenario("horizon must be ≥ 1 and period > 0".to_string()));
    }
    if profile.horizon() < scenario.horizon {
        return Err(SimError::InvalidScenario(alloc::format!(
            "profile covers {} steps, scenario needs {}",
            profile.horizon(),
            scenario.horizon
        )));
    }
    if !(scenario.noise_sigma >= 0.0) {
        return Err(SimError::InvalidScenario("noise sigma must be non-negative".to_string()));
    }
    let ctrl_model = scenario.effective_model(model);
    let plant_model = scenario.plant_model(model);
    let mut controller = Controller::new(&ctrl_model, scenario.control.clone(), Setpoints::nominal(&ctrl_model));
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise = Normal::new(0.0, scenario.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| SimError::InvalidScenario(alloc::format!("{e:?}")))?;
    let opts = PfOptions {
        tolerance: 1e-10,
        max_iterations: 50,
    };
    let slack = (0..model.n_ac()).find(|&u| model.node(u).kind == NodeKind::AcSlack);
    let mut steps = Vec::with_capacity(scenario.horizon);
    let mut last: Option<ControlDecision> = None;
    for s in 0..scenario.preroll + scenario.horizon {
        let t = s.saturating_sub(scenario.preroll);
        let next = (s + 1).saturating_sub(scenario.preroll).min(scenario.horizon - 1);
        let (spec, pv) = plant_spec(&plant_model, profile, t, controller.setpoints(), scenario.plant_fidelity)?;
        let sol = solve_pf_with(&plant_model, &spec, None, &opts).map_err(|source| SimError::PlantDiverged {
            step: t,
            source,
            spec: spec.clone(),
        })?;
        let mut state = sol.state;
        state.timestamp = t as u64;

        let mut measured = state.clone();
        if scenario.noise_sigma > 0.0 {
            for e in &mut measured.e_ac {
                let m = e.norm() + noise.sample(&mut rng);
                *e = num_complex::Complex64::from_polar(m, e.arg());
            }
            for e in &mut measured.e_dc {
                *e += noise.sample(&mut rng);
            }
        }
        let decision = controller.step_to(&measured, profile, t, next, clock);

        if s >= scenario.preroll {
            let currents: Vec<BranchCurrent> =
                (0..plant_model.lines().len()).map(|k| plant_model.line_current(&state, k)).collect();
            let currents_pu: Vec<f64> = currents
                .iter()
                .map(|c| match c {
                    BranchCurrent::Ac(i) => i.norm(),
                    BranchCurrent::Dc(i) => *i,
                })
                .collect();
            let currents_a = currents_pu
                .iter()
                .enumerate()
                .map(|(k, i)| plant_model.current_to_amps(k, *i))
                .collect();
            let dct: Vec<DctReading> = plant_model
                .dcts()
                .iter()
                .map(|d| {
                    let p = d.power(state.vm(d.primary), state.vm(d.secondary), scenario.plant_fidelity);
                    DctReading {
                        p1: p.p1,
                        p2: p.p2,
                        transfer: p.transfer,
                    }
                })
                .collect();
            let (vm_error, current_error) = match &last {
                Some(d) if d.status != DecisionStatus::Held => (
                    Some(state.magnitudes().iter().zip(&d.predicted_vm).map(|(a, b)| a - b).collect()),
                    Some(currents_pu.iter().zip(&d.predicted_current).map(|(a, b)| a - b).collect()),
                ),
                _ => (None, None),
            };
            steps.push(StepRecord {
                step: t,
                pf_iterations: sol.iterations,
                balance_error: balance_error(&plant_model, &spec, &state, scenario.plant_fidelity),
                slack_p: slack.map_or(0.0, |u| state.p[u]),
                slack_q: slack.map_or(0.0, |u| state.q[u]),
                currents_a,
                dct,
                pv_output: pv.iter().map(|(k, v)| (k.clone(), v.0)).collect(),
                pv_available: pv.iter().map(|(k, v)| (k.clone(), v.1)).collect(),
                vm_error,
                current_error,
                state,
                decision: decision.clone(),
            });
        }
        last = Some(decision);
        after_step(s);
    }
    Ok(ScenarioTrace {
        node_ids: model.nodes().iter().map(|n| n.id.clone()).collect(),
        line_ids: plant_model.lines().iter().map(|l| l.id.clone()).collect(),
        ic_ids: plant_model.ic_pairs().iter().map(|i| i.id.clone()).collect(),
        dct_ids: plant_model.dcts().iter().map(|d| d.id().to_string()).collect(),
        period_s: scenario.period_s,
        steps,
    })
}

/// `slack + Σ specified injections − converter losses − DCT losses − network losses`.
fn balance_error(model: &GridModel, spec: &PfSpec, state: &GridState, fidelity: Fidelity) -> f64 {
    let mut total = 0.0;
    for (u, node) in model.nodes().iter().enumerate() {
        match node.kind {
            NodeKind::AcSlack => total += state.p[u],
            NodeKind::AcPq | NodeKind::AcPv | NodeKind::DcP => total += spec.nodes[u].p.unwrap_or(0.0),
            _ => {}
        }
    }
    for ic in model.ic_pairs() {
        // whatever the converter does not pass through is its loss
        total += state.p[ic.ac] + state.p[ic.dc];
    }
    for d in model.dcts() {
        total -= d.power(state.vm(d.primary), state.vm(d.secondary), fidelity).loss;
    }
    total - state.network_p_losses()
}

/// Summary statistics of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: usize,
    /// Mean over steps of the per-step mean nodal voltage prediction error.
    pub vm_error_mean: f64,
    /// Smallest and largest per-step mean error.
    pub vm_error_step_min: f64,
    pub vm_error_step_max: f64,
    /// Largest absolute nodal error over the whole trace.
    pub vm_error_abs_max: f64,
    pub ampacity: Vec<AmpacityViolation>,
    pub curtailed_energy_kwh: f64,
    pub slack_q_rms_kvar: f64,
    /// Largest reactive power two converters injected with opposite signs
    /// in the same step (the smaller of the two magnitudes).
    pub ic_q_opposition_kvar: f64,
    pub max_pf_iterations: usize,
    pub max_balance_error: f64,
    pub relaxed_steps: usize,
    pub held_steps: usize,
    pub timing: TimingSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmpacityViolation {
    pub line: String,
    pub limit_a: f64,
    pub max_current_a: f64,
    /// Largest excess above the limit (0 when never exceeded).
    pub max_overshoot_a: f64,
    pub steps_violated: usize,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingSummary {
    /// Control-step wall times (ns) at the listed percentiles.
    pub percentiles: Vec<(f64, u64)>,
    pub p100_ns: u64,
    pub mean_ns: f64,
    /// Largest time of each stage.
    pub stage_max: StageTimings,
}

pub fn metrics(model: &GridModel, trace: &ScenarioTrace) -> Metrics {
    let n = trace.steps.len();
    let dt_h = trace.period_s / 3600.0;
    let base = model.base;

    let mut step_means = Vec::new();
    let mut abs_max: f64 = 0.0;
    for s in &trace.steps {
        if let Some(err) = &s.vm_error {
            step_means.push(err.iter().sum::<f64>() / err.len().max(1) as f64);
            abs_max = err.iter().fold(abs_max, |m, e| m.max(e.abs()));
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };

    let ampacity = trace
        .line_ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let limit = model
                .line_index(id)
                .map_or(f64::INFINITY, |li| model.lines()[li].ampacity_a);
            let mut max_i: f64 = 0.0;
            let mut over: f64 = 0.0;
            let mut count = 0;
            for s in &trace.steps {
                let i = s.currents_a[k].abs();
                max_i = max_i.max(i);
                if i > limit {
                    over = over.max(i - limit);
                    count += 1;
                }
            }
            AmpacityViolation {
                line: id.clone(),
                limit_a: limit,
                max_current_a: max_i,
                max_overshoot_a: over,
                steps_violated: count,
                duration_s: count as f64 * trace.period_s,
            }
        })
        .collect();

    let curtailed: f64 = trace
        .steps
        .iter()
        .map(|s| {
            s.pv_available
                .iter()
                .map(|(k, mpp)| (mpp - s.pv_output.get(k).copied().unwrap_or(*mpp)).max(0.0))
                .sum::<f64>()
        })
        .sum();

    let q_rms = if n == 0 {
        0.0
    } else {
        libm::sqrt(trace.steps.iter().map(|s| s.slack_q * s.slack_q).sum::<f64>() / n as f64)
    };

    let mut opposition: f64 = 0.0;
    for s in &trace.steps {
        let qs: Vec<f64> = trace
            .ic_ids
            .iter()
            .filter_map(|id| model.ic_pairs().iter().find(|ic| &ic.id == id))
            .map(|ic| s.state.q[ic.ac])
            .collect();
        let pos = qs.iter().fold(0.0_f64, |m, q| m.max(*q));
        let neg = qs.iter().fold(0.0_f64, |m, q| m.max(-*q));
        opposition = opposition.max(pos.min(neg));
    }

    let mut totals: Vec<u64> = trace.steps.iter().map(|s| s.decision.timings.total()).collect();
    totals.sort_unstable();
    let pick = |q: f64| -> u64 {
        if totals.is_empty() {
            return 0;
        }
        let idx = libm::ceil(q * totals.len() as f64) as usize;
        totals[idx.clamp(1, totals.len()) - 1]
    };
    let mut stage_max = StageTimings::default();
    for s in &trace.steps {
        let t = &s.decision.timings;
        stage_max.state_fetch = stage_max.state_fetch.max(t.state_fetch);
        stage_max.forecast = stage_max.forecast.max(t.forecast);
        stage_max.sensitivity = stage_max.sensitivity.max(t.sensitivity);
        stage_max.qp = stage_max.qp.max(t.qp);
        stage_max.emit = stage_max.emit.max(t.emit);
    }
    let timing = TimingSummary {
        percentiles: [0.5, 0.9, 0.99, 0.999, 1.0].iter().map(|&q| (q, pick(q))).collect(),
        p100_ns: totals.last().copied().unwrap_or(0),
        mean_ns: if totals.is_empty() {
            0.0
        } else {
            totals.iter().map(|&t| t as f64).sum::<f64>() / totals.len() as f64
        },
        stage_max,
    };

    Metrics {
        steps: n,
        vm_error_mean: mean(&step_means),
        vm_error_step_min: step_means.iter().copied().fold(0.0, f64::min),
        vm_error_step_max: step_means.iter().copied().fold(0.0, f64::max),
        vm_error_abs_max: abs_max,
        ampacity,
        curtailed_energy_kwh: base.pu_to_kw(curtailed) * dt_h,
        slack_q_rms_kvar: base.pu_to_kw(q_rms),
        ic_q_opposition_kvar: base.pu_to_kw(opposition),
        max_pf_iterations: trace.steps.iter().map(|s| s.pf_iterations).max().unwrap_or(0),
        max_balance_error: trace.steps.iter().fold(0.0, |m, s| m.max(s.balance_error.abs())),
        relaxed_steps: trace
            .steps
            .iter()
            .filter(|s| s.decision.status == DecisionStatus::Relaxed)
            .count(),
        held_steps: trace
            .steps
            .iter()
            .filter(|s| s.decision.status == DecisionStatus::Held)
            .count(),
        timing,
    }
}

/// Empirical CDF of the control-step wall time: `(ns, fraction ≤ ns)`.
pub fn timing_cdf(trace: &ScenarioTrace) -> Vec<(u64, f64)> {
    let mut totals: Vec<u64> = trace.steps.iter().map(|s| s.decision.timings.total()).collect();
    totals.sort_unstable();
    let n = totals.len() as f64;
    totals.iter().enumerate().map(|(k, &t)| (t, (k + 1) as f64 / n)).collect()
}

/// Shape of a synthetic resource trace (kW / kvar, generator convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    /// Available PV power falling from `start_kw` to `end_kw` along
    /// `end + (start − end)(1 − τ)²`; the plant produces its MPP.
    PvDecline { start_kw: f64, end_kw: f64 },
    /// Consumption fluctuating around `mean_kw` as a first-order
    /// autoregressive process, at a fixed power factor.
    Load {
        mean_kw: f64,
        sigma_kw: f64,
        correlation: f64,
        power_factor: f64,
    },
    Constant { p_kw: f64, q_kvar: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceTemplate {
    pub id: String,
    #[serde(flatten)]
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTemplate {
    pub horizon: usize,
    pub resources: Vec<ResourceTemplate>,
}

/// Deterministic synthetic profiles from a template. Every resource id must
/// name a device of `model`.
pub fn generate_profiles(model: &GridModel, seed: u64, template: &ProfileTemplate) -> Result<ResourceProfile, DeviceError> {
    let h = template.horizon;
    if h == 0 {
        return Err(DeviceError::InvalidProfile("horizon must be ≥ 1".to_string()));
    }
    let base = model.base;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut profile = ResourceProfile::new(h);
    for r in &template.resources {
        if model.device(&r.id).is_none() {
            return Err(DeviceError::UnknownResource(r.id.clone()));
        }
        let series = match r.shape {
            Shape::PvDecline { start_kw, end_kw } => {
                let p: Vec<f64> = (0..h)
                    .map(|t| {
                        let tau = if h > 1 { t as f64 / (h - 1) as f64 } else { 0.0 };
                        base.kw_to_pu(end_kw + (start_kw - end_kw) * (1.0 - tau) * (1.0 - tau))
                    })
                    .collect();
                ProfileSeries {
                    q: vec![0.0; h],
                    p_mpp: Some(p.clone()),
                    p,
                }
            }
            Shape::Load {
                mean_kw,
                sigma_kw,
                correlation,
                power_factor,
            } => {
                let innovation = sigma_kw * libm::sqrt((1.0 - correlation * correlation).max(0.0));
                let mut x = 0.0;
                let tan_phi = if power_factor > 0.0 && power_factor < 1.0 {
                    libm::sqrt(1.0 - power_factor * power_factor) / power_factor
                } else {
                    0.0
                };
                let mut p = Vec::with_capacity(h);
                let mut q = Vec::with_capacity(h);
                for _ in 0..h {
                    let kw = (mean_kw + x).max(0.0);
                    p.push(-base.kw_to_pu(kw));
                    q.push(-base.kw_to_pu(kw * tan_phi));
                    x = correlation * x + innovation * unit.sample(&mut rng);
                }
                ProfileSeries { p, q, p_mpp: None }
            }
            Shape::Constant { p_kw, q_kvar } => ProfileSeries {
                p: vec![base.kw_to_pu(p_kw); h],
                q: vec![base.kw_to_pu(q_kvar); h],
                p_mpp: None,
            },
        };
        profile.insert(&r.id, series)?;
    }
    for d in model.devices() {
        if profile.get(&d.id).is_none() {
            profile.insert(
                &d.id,
                ProfileSeries {
                    p: vec![0.0; h],
                    q: vec![0.0; h],
                    p_mpp: matches!(d.kind, DeviceKind::Pv { .. }).then(|| vec![0.0; h]),
                },
            )?;
        }
    }
    Ok(profile)
}
