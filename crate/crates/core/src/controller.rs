//! Sensitivity-based real-time optimal controller.
//!
//! Each step linearizes the grid around the latest measured state, expresses
//! every constrained quantity as `anchor + K Δ`, and solves a small convex QP
//! over the setpoints of the controllable resources:
//!
//! * active power of every curtailable PV plant,
//! * reactive power of every interfacing converter,
//! * DC voltage of every converter in `EdcQac` mode (active power in `PacQac`),
//! * transferred power of every DC transformer, tied to its terminal voltages
//!   by `ΔT = α (ΔE_1 − ΔE_2)`.
//!
//! The QP is posed in the increments `δ = z − z₀` from the present operating
//! point. Uncontrollable injections enter through their forecast change.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::devices::ResourceProfile;
use crate::error::{ControlError, QpError};
use crate::grid::{DeviceKind, GridModel, GridState, IcMode, Side};
use crate::qp::{self, KktReport, QpOptions, QpProblem};
use crate::sensitivity::{all_variables, ControlVariable, SensitivityBundle, VarKind};

/// Objective weights, limits and solver settings. All quantities per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    /// Weight of the squared slack reactive power.
    pub w_slack_q: f64,
    /// Weight of the squared PV curtailment.
    pub w_curtail: f64,
    /// Weight of the squared network losses.
    pub w_loss: f64,
    /// Linear price on curtailed power, so that curtailment is only used when
    /// no other resource can do the job.
    pub w_curtail_linear: f64,
    /// Weight of the squared DCT transfer.
    pub w_transfer: f64,
    /// Weight of the squared deviation of converter DC voltages from nominal.
    pub w_voltage_nominal: f64,
    /// Weight of the squared converter reactive power.
    pub w_ic_q: f64,
    /// Weight of the squared change of converter active power caused by the
    /// decision. The DC grid is stiff, so without it small DC voltage moves
    /// shift large powers between converters, far outside the range where
    /// the linearization holds.
    pub w_ic_p_move: f64,
    /// Weight of the squared step of every decision variable. Damps the
    /// period-two swing that a linearization refreshed every step can fall into.
    pub w_move: f64,
    /// Largest change of a converter DC voltage setpoint per step.
    pub max_delta_e: f64,
    /// Extra tangent cuts of the AC ampacity disk on each side of the present
    /// current phasor. The magnitude SC alone is blind to the curvature of
    /// `|I|` and lets the solver rotate the phasor at no predicted cost.
    pub current_facets: usize,
    /// Angle between neighbouring cuts (rad).
    pub facet_spacing: f64,
    /// L1 price of violating a grid constraint when the hard problem is infeasible.
    pub soft_penalty: f64,
    pub qp_feasibility_tol: f64,
    pub qp_max_iterations: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            w_slack_q: 1.0,
            w_curtail: 1.0,
            w_loss: 1.0,
            w_curtail_linear: 10.0,
            w_transfer: 1.0,
            w_voltage_nominal: 0.1,
            w_ic_q: 0.1,
            w_ic_p_move: 1.0,
            w_move: 100.0,
            max_delta_e: 0.02,
            current_facets: 2,
            facet_spacing: core::f64::consts::PI / 8.0,
            soft_penalty: 1e4,
            qp_feasibility_tol: 1e-12,
            qp_max_iterations: 10_000,
        }
    }
}

/// Setpoints of the controllable resources, keyed by resource id (p.u.).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Setpoints {
    /// Upper limit on the output of each curtailable PV plant.
    pub pv_p: BTreeMap<String, f64>,
    pub ic_q: BTreeMap<String, f64>,
    /// DC voltage of converters in `EdcQac` mode.
    pub ic_e: BTreeMap<String, f64>,
    /// AC active power of converters in `PacQac` mode.
    pub ic_p: BTreeMap<String, f64>,
}

impl Setpoints {
    /// No curtailment, no reactive power, nominal DC voltages.
    pub fn nominal(model: &GridModel) -> Self {
        let mut s = Setpoints::default();
        for d in model.devices() {
            if d.kind == (DeviceKind::Pv { curtailable: true }) {
                s.pv_p.insert(d.id.clone(), f64::INFINITY);
            }
        }
        for ic in model.ic_pairs() {
            s.ic_q.insert(ic.id.clone(), 0.0);
            match ic.mode {
                IcMode::EdcQac => s.ic_e.insert(ic.id.clone(), model.node(ic.dc).v_set),
                IcMode::PacQac => s.ic_p.insert(ic.id.clone(), 0.0),
            };
        }
        s
    }
}

/// Expected change of the uncontrollable part of the grid until the
/// setpoints take effect.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Present output of each curtailable PV plant.
    pub pv_now: BTreeMap<String, f64>,
    /// Available PV power at the actuation step.
    pub pv_mpp: BTreeMap<String, f64>,
    /// Change of uncontrollable active injection per unified node.
    pub dp: Vec<f64>,
    /// Change of uncontrollable reactive injection per unified node.
    pub dq: Vec<f64>,
}

/// Output a PV plant can produce at step `t`: its MPP series when present.
fn pv_available(profile: &ResourceProfile, id: &str, t: usize) -> Result<f64, ControlError> {
    match profile.pv_available(id, t) {
        Ok(v) => Ok(v),
        Err(crate::error::DeviceError::NoMpp(_)) => Ok(profile.pq(id, t)?.0),
        Err(e) => Err(e.into()),
    }
}

impl Forecast {
    /// Perfect forecast: the profile read at `next`, relative to its value
    /// at `t`. `current` are the setpoints acting at `t`.
    pub fn from_profile(
        model: &GridModel,
        profile: &ResourceProfile,
        t: usize,
        next: usize,
        current: &Setpoints,
    ) -> Result<Self, ControlError> {
        let mut f = Forecast {
            pv_now: BTreeMap::new(),
            pv_mpp: BTreeMap::new(),
            dp: vec![0.0; model.n_nodes()],
            dq: vec![0.0; model.n_nodes()],
        };
        for d in model.devices() {
            match d.kind {
                DeviceKind::Pv { curtailable: true } => {
                    let mpp_next = profile
                        .pv_available(&d.id, next)
                        .map_err(|_| ControlError::MissingForecast(d.id.clone()))?;
                    let mpp_now = profile
                        .pv_available(&d.id, t)
                        .map_err(|_| ControlError::MissingForecast(d.id.clone()))?;
                    let cap = current.pv_p.get(&d.id).copied().unwrap_or(f64::INFINITY);
                    f.pv_now.insert(d.id.clone(), mpp_now.min(cap).max(0.0));
                    f.pv_mpp.insert(d.id.clone(), mpp_next);
                }
                DeviceKind::Pv { curtailable: false } => {
                    f.dp[d.node] += pv_available(profile, &d.id, next)? - pv_available(profile, &d.id, t)?;
                    if model.is_ac(d.node) {
                        f.dq[d.node] += profile.pq(&d.id, next)?.1 - profile.pq(&d.id, t)?.1;
                    }
                }
                DeviceKind::Load | DeviceKind::Storage => {
                    let (p1, q1) = profile.pq(&d.id, next)?;
                    let (p0, q0) = profile.pq(&d.id, t)?;
                    f.dp[d.node] += p1 - p0;
                    if model.is_ac(d.node) {
                        f.dq[d.node] += q1 - q0;
                    }
                }
            }
        }
        Ok(f)
    }
}

/// A decision variable of the control QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionVar {
    /// Output of device `devices()[i]`.
    PvP(usize),
    /// Reactive power of converter `ic_pairs()[i]`.
    IcQ(usize),
    IcE(usize),
    IcP(usize),
    /// Transfer of `dcts()[i]`.
    DctT(usize),
}

impl DecisionVar {
    pub fn label(&self, model: &GridModel) -> String {
        match *self {
            DecisionVar::PvP(i) => format!("P@{}", model.devices()[i].id),
            DecisionVar::IcQ(i) => format!("Q@{}", model.ic_pairs()[i].id),
            DecisionVar::IcE(i) => format!("E@{}", model.ic_pairs()[i].id),
            DecisionVar::IcP(i) => format!("P@{}", model.ic_pairs()[i].id),
            DecisionVar::DctT(i) => format!("T@{}", model.dcts()[i].id()),
        }
    }
}

/// Affine map `value = constant + linear · δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub constant: DVector<f64>,
    pub linear: DMatrix<f64>,
}

impl Affine {
    pub fn eval(&self, delta: &DVector<f64>) -> DVector<f64> {
        &self.constant + &self.linear * delta
    }
}

/// The assembled QP together with the maps needed to interpret its solution.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub qp: QpProblem,
    pub vars: Vec<DecisionVar>,
    pub var_labels: Vec<String>,
    /// Present value of every decision variable.
    pub z0: DVector<f64>,
    /// Inequality rows that may be relaxed if the problem is infeasible.
    pub soft_rows: Vec<usize>,
    pub row_labels: Vec<String>,
    /// Predicted voltage magnitude per unified node.
    pub vm: Affine,
    /// Predicted current per line: `|I|` on AC lines, signed `I` on DC lines.
    pub current: Affine,
    /// Predicted network losses and slack reactive power (one row each).
    pub p_loss: Affine,
    pub q_slack: Affine,
    /// Box limits of every decision variable.
    pub z_min: DVector<f64>,
    pub z_max: DVector<f64>,
}

fn add_square(h: &mut DMatrix<f64>, c: &mut DVector<f64>, w: f64, a: f64, g: &DVector<f64>) {
    if w == 0.0 {
        return;
    }
    *h += g * g.transpose() * (2.0 * w);
    *c += g * (2.0 * w * a);
}

/// Assembles the control QP around `bundle.anchor`.
pub fn build_problem(
    model: &GridModel,
    bundle: &SensitivityBundle,
    forecast: &Forecast,
    config: &ControlConfig,
) -> Result<ControlProblem, ControlError> {
    let state = &bundle.anchor;
    let n_nodes = model.n_nodes();
    if forecast.dp.len() != n_nodes || forecast.dq.len() != n_nodes || state.p.len() != n_nodes {
        return Err(ControlError::Inconsistent(format!(
            "forecast or state does not span the {n_nodes} nodes of the grid"
        )));
    }

    let mut vars = Vec::new();
    let mut z0 = Vec::new();
    let mut z_min = Vec::new();
    let mut z_max = Vec::new();
    for (i, d) in model.devices().iter().enumerate() {
        if d.kind == (DeviceKind::Pv { curtailable: true }) {
            let now = *forecast
                .pv_now
                .get(&d.id)
                .ok_or_else(|| ControlError::MissingForecast(d.id.clone()))?;
            let mpp = *forecast
                .pv_mpp
                .get(&d.id)
                .ok_or_else(|| ControlError::MissingForecast(d.id.clone()))?;
            vars.push(DecisionVar::PvP(i));
            z0.push(now);
            z_min.push(0.0);
            z_max.push(mpp.max(0.0));
        }
    }
    for (i, ic) in model.ic_pairs().iter().enumerate() {
        let cap = model.base.kw_to_pu(ic.rating_kva);
        vars.push(DecisionVar::IcQ(i));
        z0.push(state.q[ic.ac]);
        z_min.push(-cap);
        z_max.push(cap);
    }
    for (i, ic) in model.ic_pairs().iter().enumerate() {
        match ic.mode {
            IcMode::EdcQac => {
                let e = state.vm(ic.dc);
                vars.push(DecisionVar::IcE(i));
                z0.push(e);
                z_min.push(e - config.max_delta_e);
                z_max.push(e + config.max_delta_e);
            }
            IcMode::PacQac => {
                let cap = model.base.kw_to_pu(ic.rating_kva);
                vars.push(DecisionVar::IcP(i));
                z0.push(state.p[ic.ac]);
                z_min.push(-cap);
                z_max.push(cap);
            }
        }
    }
    for (i, d) in model.dcts().iter().enumerate() {
        vars.push(DecisionVar::DctT(i));
        z0.push(d.alpha * (state.vm(d.primary) - state.vm(d.secondary)));
        z_min.push(-d.rating);
        z_max.push(d.rating);
    }
    let nz = vars.len();
    let nv = bundle.variables.len();
    let z0 = DVector::from_vec(z0);

    // ΔX = B δ + w over the bundle's variables.
    let col = |kind: VarKind, node: usize| -> Result<usize, ControlError> {
        bundle.column(ControlVariable::new(kind, node)).ok_or_else(|| {
            ControlError::Inconsistent(format!(
                "sensitivity bundle lacks {:?} at `{}`",
                kind,
                model.node(node).id
            ))
        })
    };
    let mut b = DMatrix::zeros(nv, nz);
    for (k, v) in vars.iter().enumerate() {
        match *v {
            DecisionVar::PvP(i) => b[(col(VarKind::P, model.devices()[i].node)?, k)] += 1.0,
            DecisionVar::IcQ(i) => b[(col(VarKind::Q, model.ic_pairs()[i].ac)?, k)] += 1.0,
            DecisionVar::IcE(i) => b[(col(VarKind::V, model.ic_pairs()[i].dc)?, k)] += 1.0,
            DecisionVar::IcP(i) => b[(col(VarKind::P, model.ic_pairs()[i].ac)?, k)] += 1.0,
            DecisionVar::DctT(i) => {
                let d = &model.dcts()[i];
                b[(col(VarKind::P, d.primary)?, k)] -= 1.0;
                b[(col(VarKind::P, d.secondary)?, k)] += 1.0;
            }
        }
    }
    let mut w = DVector::zeros(nv);
    for u in 0..n_nodes {
        if forecast.dp[u] != 0.0 {
            w[col(VarKind::P, u)?] += forecast.dp[u];
        }
        if forecast.dq[u] != 0.0 && model.is_ac(u) {
            w[col(VarKind::Q, u)?] += forecast.dq[u];
        }
    }

    let affine = |k: &DMatrix<f64>, anchor: DVector<f64>| Affine {
        constant: anchor + k * &w,
        linear: k * &b,
    };
    let vm = affine(&bundle.voltage.k_e, DVector::from_vec(state.magnitudes()));
    let current = affine(&bundle.current.k_i, DVector::from_vec(bundle.current.current.clone()));
    let p_loss = affine(
        &DMatrix::from_row_slice(1, nv, bundle.loss.k_ploss.as_slice()),
        DVector::from_element(1, state.network_p_losses()),
    );
    let slacks: Vec<usize> = (0..model.n_ac())
        .filter(|&u| model.node(u).kind == crate::grid::NodeKind::AcSlack)
        .collect();
    let mut kq = DMatrix::zeros(1, nv);
    let mut q0 = 0.0;
    for &s in &slacks {
        kq += bundle.loss.k_q_inj.row(s);
        q0 += state.q[s];
    }
    let q_slack = affine(&kq, DVector::from_element(1, q0));
    let ic_p = affine(&bundle.loss.k_p_inj, DVector::from_vec(state.p.clone()));

    // Objective.
    let mut h = DMatrix::zeros(nz, nz);
    let mut c = DVector::zeros(nz);
    add_square(&mut h, &mut c, config.w_slack_q, q_slack.constant[0], &q_slack.linear.row(0).transpose());
    add_square(&mut h, &mut c, config.w_loss, p_loss.constant[0], &p_loss.linear.row(0).transpose());
    let unit = |k: usize| {
        let mut g = DVector::zeros(nz);
        g[k] = 1.0;
        g
    };
    for (k, v) in vars.iter().enumerate() {
        let g = unit(k);
        match *v {
            DecisionVar::PvP(_) => {
                add_square(&mut h, &mut c, config.w_curtail, z0[k] - z_max[k], &g);
                c[k] -= config.w_curtail_linear;
            }
            DecisionVar::IcQ(_) => add_square(&mut h, &mut c, config.w_ic_q, z0[k], &g),
            DecisionVar::IcE(i) => {
                let nominal = model.node(model.ic_pairs()[i].dc).v_set;
                add_square(&mut h, &mut c, config.w_voltage_nominal, z0[k] - nominal, &g);
            }
            DecisionVar::IcP(_) => {}
            DecisionVar::DctT(_) => add_square(&mut h, &mut c, config.w_transfer, z0[k], &g),
        }
        add_square(&mut h, &mut c, config.w_move, 0.0, &g);
    }
    for ic in model.ic_pairs() {
        add_square(&mut h, &mut c, config.w_ic_p_move, 0.0, &ic_p.linear.row(ic.ac).transpose());
    }

    // Constraints `a δ ≤ b`.
    let mut rows: Vec<(DVector<f64>, f64, String, bool)> = Vec::new();
    let push_range = |rows: &mut Vec<(DVector<f64>, f64, String, bool)>,
                          a: DVector<f64>,
                          value: f64,
                          lo: f64,
                          hi: f64,
                          name: &str,
                          soft: bool| {
        if a.iter().all(|x| *x == 0.0) {
            return;
        }
        if hi.is_finite() {
            rows.push((a.clone(), hi - value, format!("max {name}"), soft));
        }
        if lo.is_finite() {
            rows.push((-a, value - lo, format!("min {name}"), soft));
        }
    };
    for u in 0..n_nodes {
        let node = model.node(u);
        push_range(
            &mut rows,
            vm.linear.row(u).transpose(),
            vm.constant[u],
            node.v_min,
            node.v_max,
            &format!("voltage@{}", node.id),
            true,
        );
    }
    for (k, line) in model.lines().iter().enumerate() {
        let lim = line.ampacity_pu();
        let lo = match line.side() {
            Side::Ac => f64::NEG_INFINITY,
            Side::Dc => -lim,
        };
        push_range(
            &mut rows,
            current.linear.row(k).transpose(),
            current.constant[k],
            lo,
            lim,
            &format!("current@{}", line.id),
            true,
        );
    }
    let cur_re = affine(&bundle.current.k_re, DVector::from_iterator(model.lines().len(), bundle.current.phasor.iter().map(|c| c.re)));
    let cur_im = affine(&bundle.current.k_im, DVector::from_iterator(model.lines().len(), bundle.current.phasor.iter().map(|c| c.im)));
    for (k, line) in model.lines().iter().enumerate() {
        if line.side() != Side::Ac || bundle.current.flagged[k] {
            continue;
        }
        let theta0 = bundle.current.phasor[k].arg();
        for j in 1..=config.current_facets {
            for sign in [-1.0, 1.0] {
                let theta = theta0 + sign * j as f64 * config.facet_spacing;
                let (s, c) = (libm::sin(theta), libm::cos(theta));
                let a = cur_re.linear.row(k).transpose() * c + cur_im.linear.row(k).transpose() * s;
                let value = cur_re.constant[k] * c + cur_im.constant[k] * s;
                push_range(
                    &mut rows,
                    a,
                    value,
                    f64::NEG_INFINITY,
                    line.ampacity_pu(),
                    &format!("current@{} cut {:+}", line.id, sign as i32 * j as i32),
                    true,
                );
            }
        }
    }
    for ic in model.ic_pairs() {
        if ic.mode == IcMode::EdcQac {
            let cap = model.base.kw_to_pu(ic.rating_kva);
            push_range(
                &mut rows,
                ic_p.linear.row(ic.ac).transpose(),
                ic_p.constant[ic.ac],
                -cap,
                cap,
                &format!("active power@{}", ic.id),
                true,
            );
        }
    }
    for k in 0..nz {
        let label = vars[k].label(model);
        push_range(&mut rows, unit(k), z0[k], z_min[k], z_max[k], &label, false);
    }

    let m = rows.len();
    let mut a_in = DMatrix::zeros(m, nz);
    let mut b_in = DVector::zeros(m);
    let mut row_labels = Vec::with_capacity(m);
    let mut soft_rows = Vec::new();
    for (r, (a, bound, label, soft)) in rows.into_iter().enumerate() {
        a_in.set_row(r, &a.transpose());
        b_in[r] = bound;
        row_labels.push(label);
        if soft {
            soft_rows.push(r);
        }
    }

    // DCT coupling: δT − α (ΔE_1 − ΔE_2) = 0.
    let n_dct = model.dcts().len();
    let mut a_eq = DMatrix::zeros(n_dct, nz);
    let mut b_eq = DVector::zeros(n_dct);
    for (k, v) in vars.iter().enumerate() {
        if let DecisionVar::DctT(i) = *v {
            let d = &model.dcts()[i];
            let row = (vm.linear.row(d.primary) - vm.linear.row(d.secondary)) * (-d.alpha);
            a_eq.set_row(i, &row);
            a_eq[(i, k)] += 1.0;
            b_eq[i] = d.alpha * (vm.constant[d.primary] - vm.constant[d.secondary]) - z0[k];
        }
    }

    let var_labels = vars.iter().map(|v| v.label(model)).collect();
    Ok(ControlProblem {
        qp: QpProblem {
            h,
            c,
            a_eq,
            b_eq,
            a_in,
            b_in,
        },
        vars,
        var_labels,
        z0,
        soft_rows,
        row_labels,
        vm,
        current,
        p_loss,
        q_slack,
        z_min: DVector::from_vec(z_min),
        z_max: DVector::from_vec(z_max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionStatus {
    Optimal,
    /// The hard problem was infeasible; grid constraints were relaxed.
    Relaxed,
    /// A stage failed and the previous setpoints were kept.
    Held,
}

/// Wall time of each stage of a control step, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub state_fetch: u64,
    pub forecast: u64,
    pub sensitivity: u64,
    pub qp: u64,
    pub emit: u64,
}

impl StageTimings {
    pub fn total(&self) -> u64 {
        self.state_fetch + self.forecast + self.sensitivity + self.qp + self.emit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub step: usize,
    pub setpoints: Setpoints,
    pub status: DecisionStatus,
    pub objective: f64,
    pub kkt: KktReport,
    pub qp_iterations: usize,
    pub active_constraints: Vec<String>,
    pub predicted_vm: Vec<f64>,
    pub predicted_current: Vec<f64>,
    pub predicted_p_loss: f64,
    pub predicted_q_slack: f64,
    /// Predicted DCT transfers, in `dcts()` order.
    pub predicted_transfer: Vec<f64>,
    pub condition_estimate: f64,
    pub timings: StageTimings,
    pub message: Option<String>,
}

/// Solution of a [`ControlProblem`] mapped back to setpoints and predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Solved {
    pub z: DVector<f64>,
    pub delta: DVector<f64>,
    pub status: DecisionStatus,
    pub objective: f64,
    pub kkt: KktReport,
    pub iterations: usize,
    pub active: Vec<usize>,
}

/// Solves the control QP, falling back to an L1-relaxation of the grid
/// constraints when the hard problem is infeasible.
pub fn solve_problem(problem: &ControlProblem, config: &ControlConfig) -> Result<Solved, ControlError> {
    let opts = QpOptions {
        feasibility_tol: config.qp_feasibility_tol,
        max_iterations: config.qp_max_iterations,
    };
    match qp::solve_with(&problem.qp, &opts) {
        Ok(s) => Ok(finish(problem, s.x, DecisionStatus::Optimal, s.objective, s.kkt, s.iterations, s.active)),
        Err(QpError::Infeasible { .. }) => {
            let relaxed = relax(problem, config);
            let s = qp::solve_with(&relaxed, &opts)?;
            let nz = problem.z0.len();
            let delta = s.x.rows(0, nz).into_owned();
            let active: Vec<usize> = s.active.into_iter().filter(|&r| r < problem.qp.a_in.nrows()).collect();
            Ok(finish(problem, delta, DecisionStatus::Relaxed, s.objective, s.kkt, s.iterations, active))
        }
        Err(e) => Err(e.into()),
    }
}

fn finish(
    problem: &ControlProblem,
    delta: DVector<f64>,
    status: DecisionStatus,
    objective: f64,
    kkt: KktReport,
    iterations: usize,
    active: Vec<usize>,
) -> Solved {
    let mut z = &problem.z0 + &delta;
    // Snap onto the boxes so that setpoints satisfy them exactly.
    for k in 0..z.len() {
        let (lo, hi) = (problem.z_min[k], problem.z_max[k]);
        if (z[k] - hi).abs() <= 1e-9 || z[k] > hi {
            z[k] = hi;
        } else if (z[k] - lo).abs() <= 1e-9 || z[k] < lo {
            z[k] = lo;
        }
    }
    let delta = &z - &problem.z0;
    Solved {
        z,
        delta,
        status,
        objective,
        kkt,
        iterations,
        active,
    }
}

/// Adds one non-negative slack per soft row, priced linearly (plus a tiny
/// quadratic term that keeps the Hessian positive definite).
fn relax(problem: &ControlProblem, config: &ControlConfig) -> QpProblem {
    let qp = &problem.qp;
    let nz = qp.dim();
    let ns = problem.soft_rows.len();
    let n = nz + ns;
    let mut h = DMatrix::zeros(n, n);
    h.view_mut((0, 0), (nz, nz)).copy_from(&qp.h);
    for s in 0..ns {
        h[(nz + s, nz + s)] = 1e-6;
    }
    let mut c = DVector::zeros(n);
    c.rows_mut(0, nz).copy_from(&qp.c);
    for s in 0..ns {
        c[nz + s] = config.soft_penalty;
    }
    let m = qp.a_in.nrows();
    let mut a_in = DMatrix::zeros(m + ns, n);
    let mut b_in = DVector::zeros(m + ns);
    a_in.view_mut((0, 0), (m, nz)).copy_from(&qp.a_in);
    b_in.rows_mut(0, m).copy_from(&qp.b_in);
    for (s, &r) in problem.soft_rows.iter().enumerate() {
        a_in[(r, nz + s)] = -1.0;
        a_in[(m + s, nz + s)] = -1.0;
    }
    let mut a_eq = DMatrix::zeros(qp.a_eq.nrows(), n);
    a_eq.view_mut((0, 0), (qp.a_eq.nrows(), nz)).copy_from(&qp.a_eq);
    QpProblem {
        h,
        c,
        a_eq,
        b_eq: qp.b_eq.clone(),
        a_in,
        b_in,
    }
}

/// Source of monotonic time for stage instrumentation.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

/// A clock that never advances; keeps runs free of timing noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_ns(&self) -> u64 {
        0
    }
}

/// Runs control steps and remembers the last emitted setpoints, which are
/// re-emitted if a step fails.
#[derive(Debug, Clone)]
pub struct Controller<'a> {
    model: &'a GridModel,
    config: ControlConfig,
    variables: Vec<ControlVariable>,
    current: Setpoints,
}

impl<'a> Controller<'a> {
    pub fn new(model: &'a GridModel, config: ControlConfig, initial: Setpoints) -> Self {
        Controller {
            model,
            config,
            variables: all_variables(model),
            current: initial,
        }
    }

    pub fn setpoints(&self) -> &Setpoints {
        &self.current
    }

    pub fn config(&self) -> &ControlConfig {
        &self.config
    }

    /// One pass of the control loop for the state measured at step `t`. The
    /// returned setpoints are meant to act from step `t + 1`, forecast from
    /// the profile (held at its last step).
    pub fn step(&mut self, state: &GridState, profile: &ResourceProfile, t: usize, clock: &dyn Clock) -> ControlDecision {
        let next = (t + 1).min(profile.horizon().saturating_sub(1));
        self.step_to(state, profile, t, next, clock)
    }

    /// As [`Self::step`], with the profile step at actuation given explicitly.
    pub fn step_to(
        &mut self,
        state: &GridState,
        profile: &ResourceProfile,
        t: usize,
        next: usize,
        clock: &dyn Clock,
    ) -> ControlDecision {
        let mut timings = StageTimings::default();
        let t0 = clock.now_ns();
        let state = state.clone();
        let t1 = clock.now_ns();
        timings.state_fetch = t1 - t0;
        match self.try_step(&state, profile, t, next, clock, &mut timings, t1) {
            Ok(d) => {
                self.current = d.setpoints.clone();
                d
            }
            Err(e) => ControlDecision {
                step: t,
                setpoints: self.current.clone(),
                status: DecisionStatus::Held,
                objective: f64::NAN,
                kkt: KktReport::default(),
                qp_iterations: 0,
                active_constraints: Vec::new(),
                predicted_vm: state.magnitudes(),
                predicted_current: Vec::new(),
                predicted_p_loss: state.network_p_losses(),
                predicted_q_slack: f64::NAN,
                predicted_transfer: Vec::new(),
                condition_estimate: f64::NAN,
                timings,
                message: Some(e.to_string()),
            },
        }
    }

    fn try_step(
        &self,
        state: &GridState,
        profile: &ResourceProfile,
        t: usize,
        next: usize,
        clock: &dyn Clock,
        timings: &mut StageTimings,
        start: u64,
    ) -> Result<ControlDecision, ControlError> {
        let model = self.model;
        let forecast = Forecast::from_profile(model, profile, t, next, &self.current)?;
        let t2 = clock.now_ns();
        timings.forecast = t2 - start;
        let bundle = SensitivityBundle::compute(model, state, &self.variables)?;
        let t3 = clock.now_ns();
        timings.sensitivity = t3 - t2;
        let problem = build_problem(model, &bundle, &forecast, &self.config)?;
        let solved = solve_problem(&problem, &self.config)?;
        let t4 = clock.now_ns();
        timings.qp = t4 - t3;
        let mut d = emit(model, &problem, &solved, &self.current, t);
        d.condition_estimate = bundle.voltage.condition;
        timings.emit = clock.now_ns() - t4;
        d.timings = *timings;
        Ok(d)
    }
}

/// Turns a solved problem into a decision record.
pub fn emit(model: &GridModel, problem: &ControlProblem, solved: &Solved, previous: &Setpoints, step: usize) -> ControlDecision {
    let mut setpoints = previous.clone();
    let mut transfer = Vec::new();
    for (k, v) in problem.vars.iter().enumerate() {
        let z = solved.z[k];
        match *v {
            DecisionVar::PvP(i) => {
                setpoints.pv_p.insert(model.devices()[i].id.clone(), z);
            }
            DecisionVar::IcQ(i) => {
                setpoints.ic_q.insert(model.ic_pairs()[i].id.clone(), z);
            }
            DecisionVar::IcE(i) => {
                setpoints.ic_e.insert(model.ic_pairs()[i].id.clone(), z);
            }
            DecisionVar::IcP(i) => {
                setpoints.ic_p.insert(model.ic_pairs()[i].id.clone(), z);
            }
            DecisionVar::DctT(_) => transfer.push(z),
        }
    }
    let vm = problem.vm.eval(&solved.delta);
    let current = problem.current.eval(&solved.delta);
    ControlDecision {
        step,
        setpoints,
        status: solved.status,
        objective: solved.objective,
        kkt: solved.kkt,
        qp_iterations: solved.iterations,
        active_constraints: solved.active.iter().map(|&r| problem.row_labels[r].clone()).collect(),
        predicted_vm: vm.iter().copied().collect(),
        predicted_current: current.iter().copied().collect(),
        predicted_p_loss: problem.p_loss.eval(&solved.delta)[0],
        predicted_q_slack: problem.q_slack.eval(&solved.delta)[0],
        predicted_transfer: transfer,
        condition_estimate: f64::NAN,
        timings: StageTimings::default(),
        message: None,
    }
}

/// Stateless form of one control step, starting from `previous` setpoints.
pub fn control_step(
    model: &GridModel,
    state: &GridState,
    profile: &ResourceProfile,
    t: usize,
    previous: &Setpoints,
    config: &ControlConfig,
    clock: &dyn Clock,
) -> ControlDecision {
    Controller::new(model, config.clone(), previous.clone()).step(state, profile, t, clock)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{Fidelity, ProfileSeries};
    use crate::grid::tests::node;
    use crate::grid::{Base, DeviceDef, GridDef, IcDef, IcLoss, LineDef, Node, NodeKind};
    use crate::power_flow::{solve_pf_with, PfOptions};
    use crate::simulator::plant_spec;

    /// Weak feeder with a PV plant at its end, one converter and a DC load.
    fn feeder(ampacity_ab: f64) -> GridModel {
        let line = |id: &str, a: &str, b: &str, r: f64, x: Option<f64>, amp: f64| LineDef {
            id: id.into(),
            from: a.into(),
            to: b.into(),
            r_ohm: r,
            x_ohm: x,
            ampacity_a: amp,
        };
        let lim = |mut n: Node| {
            n.v_min = 0.95;
            n.v_max = 1.05;
            n
        };
        let def = GridDef {
            name: "feeder".into(),
            base: Base {
                s_va: 100e3,
                v_ac: 400.0,
                v_dc: 800.0,
            },
            ac_nodes: vec![
                node("S", NodeKind::AcSlack),
                lim(node("A", NodeKind::AcPq)),
                lim(node("B", NodeKind::AcPq)),
                lim(node("C", NodeKind::IcAc(IcMode::EdcQac))),
            ],
            dc_nodes: vec![
                lim(node("D", NodeKind::IcDc(IcMode::EdcQac))),
                lim(node("P", NodeKind::DcP)),
            ],
            ic_pairs: vec![IcDef {
                id: "IC".into(),
                ac: "C".into(),
                dc: "D".into(),
                rating_kva: 40.0,
                loss: IcLoss {
                    a0: 0.002,
                    a1: 0.005,
                    a2: 0.02,
                    filter_g: 0.001,
                },
            }],
            lines: vec![
                line("SA", "S", "A", 0.05, Some(0.02), 400.0),
                line("AB", "A", "B", 0.3, Some(0.1), ampacity_ab),
                line("AC", "A", "C", 0.02, Some(0.01), 400.0),
                line("DP", "D", "P", 0.1, None, 400.0),
            ],
            devices: vec![
                DeviceDef {
                    id: "pv".into(),
                    node: "B".into(),
                    kind: DeviceKind::Pv { curtailable: true },
                    rating_kva: 60.0,
                },
                DeviceDef {
                    id: "load".into(),
                    node: "B".into(),
                    kind: DeviceKind::Load,
                    rating_kva: 20.0,
                },
                DeviceDef {
                    id: "dc_load".into(),
                    node: "P".into(),
                    kind: DeviceKind::Load,
                    rating_kva: 20.0,
                },
            ],
            dcts: vec![],
        };
        GridModel::from_def(&def).unwrap()
    }

    fn constant_profile(model: &GridModel, pv_kw: f64, horizon: usize) -> ResourceProfile {
        let b = model.base;
        let mut p = ResourceProfile::new(horizon);
        let s = |pk: f64, qk: f64, mpp: bool| ProfileSeries {
            p: vec![b.kw_to_pu(pk); horizon],
            q: vec![b.kw_to_pu(qk); horizon],
            p_mpp: mpp.then(|| vec![b.kw_to_pu(pk); horizon]),
        };
        p.insert("pv", s(pv_kw, 0.0, true)).unwrap();
        p.insert("load", s(-2.0, -0.5, false)).unwrap();
        p.insert("dc_load", s(-5.0, 0.0, false)).unwrap();
        p
    }

    fn plant(model: &GridModel, profile: &ResourceProfile, sp: &Setpoints) -> GridState {
        let (spec, _) = plant_spec(model, profile, 0, sp, Fidelity::Ideal).unwrap();
        let opts = PfOptions {
            tolerance: 1e-11,
            max_iterations: 50,
        };
        solve_pf_with(model, &spec, None, &opts).unwrap().state
    }

    /// Closed loop with a constant profile; returns the last decision and the
    /// plant state it produces.
    fn settle(model: &GridModel, profile: &ResourceProfile, steps: usize) -> (ControlDecision, GridState) {
        let mut ctrl = Controller::new(model, ControlConfig::default(), Setpoints::nominal(model));
        let mut state = plant(model, profile, ctrl.setpoints());
        let mut last = None;
        for _ in 0..steps {
            let d = ctrl.step(&state, profile, 0, &NullClock);
            assert_ne!(d.status, DecisionStatus::Held, "{:?}", d.message);
            state = plant(model, profile, &d.setpoints);
            last = Some(d);
        }
        (last.unwrap(), state)
    }

    fn ac_current_a(model: &GridModel, state: &GridState, id: &str) -> f64 {
        let k = model.line_index(id).unwrap();
        model.current_to_amps(k, model.line_current(state, k).magnitude())
    }

    #[test]
    fn light_load_leaves_pv_uncurtailed() {
        let m = feeder(400.0);
        let prof = constant_profile(&m, 5.0, 2);
        let (d, state) = settle(&m, &prof, 5);
        assert_eq!(d.status, DecisionStatus::Optimal);
        assert!((d.setpoints.pv_p["pv"] - m.base.kw_to_pu(5.0)).abs() < 1e-9);
        for u in 0..m.n_nodes() {
            let n = m.node(u);
            assert!(state.vm(u) <= n.v_max + 1e-9 && state.vm(u) >= n.v_min - 1e-9);
        }
    }

    #[test]
    fn unchanged_inputs_are_a_fixed_point() {
        let m = feeder(400.0);
        let prof = constant_profile(&m, 10.0, 2);
        let (d, state) = settle(&m, &prof, 400);
        let mut ctrl = Controller::new(&m, ControlConfig::default(), d.setpoints.clone());
        let again = ctrl.step(&state, &prof, 0, &NullClock);
        for (k, v) in &d.setpoints.ic_q {
            assert!((again.setpoints.ic_q[k] - v).abs() < 1e-6, "{k}: {} vs {v}", again.setpoints.ic_q[k]);
        }
        for (k, v) in &d.setpoints.ic_e {
            assert!((again.setpoints.ic_e[k] - v).abs() < 1e-6, "{k}");
        }
        assert!((again.setpoints.pv_p["pv"] - d.setpoints.pv_p["pv"]).abs() < 1e-6);
    }

    #[test]
    fn overvoltage_is_removed_by_curtailment() {
        let m = feeder(400.0);
        let prof = constant_profile(&m, 60.0, 2);
        let b = m.node_index("B").unwrap();
        let open = plant(&m, &prof, &Setpoints::nominal(&m));
        assert!(open.vm(b) > 1.05, "fixture must start above the limit: {}", open.vm(b));
        let (d, state) = settle(&m, &prof, 40);
        assert!(d.setpoints.pv_p["pv"] < m.base.kw_to_pu(60.0) - 1e-3, "no curtailment");
        assert!(state.vm(b) <= 1.05 + 1e-5, "vm {}", state.vm(b));
    }

    #[test]
    fn ampacity_is_respected_on_the_plant() {
        let m = feeder(40.0);
        let prof = constant_profile(&m, 40.0, 2);
        let open = plant(&m, &prof, &Setpoints::nominal(&m));
        assert!(ac_current_a(&m, &open, "AB") > 40.0);
        let (d, state) = settle(&m, &prof, 40);
        assert!(d.setpoints.pv_p["pv"] < m.base.kw_to_pu(40.0));
        assert!(ac_current_a(&m, &state, "AB") <= 40.0 + 1e-3);
    }

    fn problem_at(m: &GridModel, prof: &ResourceProfile) -> (ControlProblem, ControlConfig) {
        let config = ControlConfig::default();
        let sp = Setpoints::nominal(m);
        let state = plant(m, prof, &sp);
        let bundle = SensitivityBundle::compute(m, &state, &all_variables(m)).unwrap();
        let f = Forecast::from_profile(m, prof, 0, 1, &sp).unwrap();
        (build_problem(m, &bundle, &f, &config).unwrap(), config)
    }

    #[test]
    fn qp_solution_matches_grid_search() {
        let m = feeder(400.0);
        let prof = constant_profile(&m, 60.0, 2);
        let (problem, config) = problem_at(&m, &prof);
        assert_eq!(problem.vars.len(), 3);
        assert_eq!(problem.qp.a_eq.nrows(), 0);
        let solved = solve_problem(&problem, &config).unwrap();
        assert_eq!(solved.status, DecisionStatus::Optimal);
        let qp = &problem.qp;

        // Zooming grid search over the feasible set, started from the box of
        // every variable.
        let outer_lo: Vec<f64> = (0..3).map(|k| (problem.z_min[k] - problem.z0[k]).max(-0.5)).collect();
        let outer_hi: Vec<f64> = (0..3).map(|k| (problem.z_max[k] - problem.z0[k]).min(0.5)).collect();
        let (mut lo, mut hi) = (outer_lo.clone(), outer_hi.clone());
        let n = 24;
        let mut best = (f64::INFINITY, DVector::zeros(3));
        for _ in 0..14 {
            for i in 0..=n {
                for j in 0..=n {
                    for l in 0..=n {
                        let x = DVector::from_vec(
                            [i, j, l]
                                .iter()
                                .enumerate()
                                .map(|(k, &s)| lo[k] + (hi[k] - lo[k]) * s as f64 / n as f64)
                                .collect(),
                        );
                        if qp.max_violation(&x) > 1e-12 {
                            continue;
                        }
                        let f = qp.objective(&x);
                        if f < best.0 {
                            best = (f, x);
                        }
                    }
                }
            }
            for k in 0..3 {
                let w = (hi[k] - lo[k]) / 4.0;
                lo[k] = (best.1[k] - w).max(outer_lo[k]);
                hi[k] = (best.1[k] + w).min(outer_hi[k]);
            }
        }
        let delta = DVector::from_fn(3, |k, _| solved.z[k] - problem.z0[k]);
        let f_qp = qp.objective(&delta);
        assert!(best.0 >= f_qp - 1e-9, "grid {} below QP {}", best.0, f_qp);
        assert!((best.0 - f_qp).abs() < 1e-5 * f_qp.abs().max(1.0), "grid {} QP {}", best.0, f_qp);
        assert!((&best.1 - &delta).amax() < 1e-3, "{} vs {}", best.1, delta);
    }

    #[test]
    fn identical_inputs_give_identical_decisions() {
        let m = feeder(40.0);
        let prof = constant_profile(&m, 40.0, 2);
        let state = plant(&m, &prof, &Setpoints::nominal(&m));
        let run = || Controller::new(&m, ControlConfig::default(), Setpoints::nominal(&m)).step(&state, &prof, 0, &NullClock);
        let (a, b) = (run(), run());
        assert_eq!(a.setpoints, b.setpoints);
        assert_eq!(a.predicted_vm, b.predicted_vm);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }
}
