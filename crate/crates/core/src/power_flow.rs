//! Unified Newton–Raphson power flow for hybrid AC/DC grids.
//!
//! The unknown vector is `x = [|E_ac| (N), ∠E_ac (N), E_dc (M)]`. Every node
//! owns one equation row per unknown it contributes: AC node `i` owns rows
//! `i` and `N + i`, DC node `j` owns row `2N + j`. Nodes whose voltage is
//! imposed keep their unknowns with an identity row `v − v* = 0`, so the
//! Jacobian layout never depends on node kinds.
//!
//! | kind               | row `i`                 | row `N + i` / `2N + j` |
//! |--------------------|-------------------------|------------------------|
//! | slack              | `|E| − |E|*`            | `∠E − ∠E*`             |
//! | PQ                 | `P − P*`                | `Q − Q*`               |
//! | PV                 | `P − P*`                | `|E| − |E|*`           |
//! | IC-AC, P/Q mode    | `P − P*`                | `Q − Q*`               |
//! | IC-AC, E/Q mode    | `P_l + P_k + loss`      | `Q − Q*`               |
//! | DC-P               |                         | `P − P* − P_dct(E)`    |
//! | DC-V               |                         | `E − E*`               |
//! | IC-DC, P/Q mode    |                         | `P_k + P_l + loss`     |
//! | IC-DC, E/Q mode    |                         | `E − E*`               |
//!
//! All powers are network injections (generator convention). A converter
//! therefore satisfies `P_ac,l + P_dc,k + P_loss = 0`: whatever leaves one
//! side enters the other, minus its own losses.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::devices::Fidelity;
use crate::error::PfError;
use crate::grid::{GridModel, GridState, IcLoss, IcMode, NodeKind};
use crate::linalg::{max_abs, Lu};

/// Specified quantities at one node. Which fields must be set depends on the
/// node kind; see [`PfSpec::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NodeSetpoint {
    pub p: Option<f64>,
    pub q: Option<f64>,
    /// Voltage magnitude (AC) or voltage (DC).
    pub v: Option<f64>,
    pub angle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfSpec {
    /// One entry per node in unified order.
    pub nodes: Vec<NodeSetpoint>,
    pub dct_fidelity: Fidelity,
}

/// Which of `(p, q, v, angle)` a node kind specifies.
pub fn required_fields(kind: NodeKind) -> [bool; 4] {
    match kind {
        NodeKind::AcSlack => [false, false, true, true],
        NodeKind::AcPq => [true, true, false, false],
        NodeKind::AcPv => [true, false, true, false],
        NodeKind::IcAc(IcMode::PacQac) => [true, true, false, false],
        NodeKind::IcAc(IcMode::EdcQac) => [false, true, false, false],
        NodeKind::IcDc(IcMode::PacQac) => [false, false, false, false],
        NodeKind::IcDc(IcMode::EdcQac) => [false, false, true, false],
        NodeKind::DcP => [true, false, false, false],
        NodeKind::DcV => [false, false, true, false],
    }
}

impl PfSpec {
    /// Zero injections and every imposed voltage at its nominal setpoint.
    pub fn nominal(model: &GridModel) -> Self {
        let nodes = model
            .nodes()
            .iter()
            .map(|n| {
                let [p, q, v, a] = required_fields(n.kind);
                NodeSetpoint {
                    p: p.then_some(0.0),
                    q: q.then_some(0.0),
                    v: v.then_some(n.v_set),
                    angle: a.then_some(0.0),
                }
            })
            .collect();
        PfSpec {
            nodes,
            dct_fidelity: Fidelity::Ideal,
        }
    }

    /// The specification that `state` solves. DCT injections are removed from
    /// the DC-P setpoints since the solver adds them back from the voltages.
    pub fn from_state(model: &GridModel, state: &GridState, dct_fidelity: Fidelity) -> Self {
        let n_ac = model.n_ac();
        let mut p = state.p.clone();
        for d in model.dcts() {
            let pw = d.power(state.vm(d.primary), state.vm(d.secondary), dct_fidelity);
            p[d.primary] -= pw.p1;
            p[d.secondary] -= pw.p2;
        }
        let nodes = model
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let [fp, fq, fv, fa] = required_fields(n.kind);
                NodeSetpoint {
                    p: fp.then_some(p[i]),
                    q: fq.then(|| state.q[i]),
                    v: fv.then(|| state.vm(i)),
                    angle: fa.then(|| state.e_ac[i].arg()),
                }
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(nodes.len(), n_ac + model.n_dc());
        PfSpec { nodes, dct_fidelity }
    }

    pub fn validate(&self, model: &GridModel) -> Result<(), PfError> {
        if self.nodes.len() != model.n_nodes() {
            return Err(PfError::InconsistentSpec(format!(
                "{} setpoints for {} nodes",
                self.nodes.len(),
                model.n_nodes()
            )));
        }
        for (node, sp) in model.nodes().iter().zip(&self.nodes) {
            let need = required_fields(node.kind);
            let have = [sp.p, sp.q, sp.v, sp.angle];
            for (k, name) in ["P", "Q", "V", "angle"].iter().enumerate() {
                match (need[k], have[k]) {
                    (true, None) => {
                        return Err(PfError::InconsistentSpec(format!("node `{}` is missing {name}", node.id)))
                    }
                    (false, Some(_)) => {
                        return Err(PfError::InconsistentSpec(format!(
                            "node `{}` ({:?}) does not accept {name}",
                            node.id, node.kind
                        )))
                    }
                    (_, Some(v)) if !v.is_finite() => {
                        return Err(PfError::InconsistentSpec(format!("node `{}`: {name} is not finite", node.id)))
                    }
                    _ => {}
                }
            }
            if let Some(v) = sp.v {
                if !(v > 0.0) {
                    return Err(PfError::InconsistentSpec(format!(
                        "node `{}`: voltage setpoint must be positive",
                        node.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfSolution {
    pub state: GridState,
    /// Residual evaluations, including the final one that met the tolerance.
    pub iterations: usize,
    pub max_mismatch: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions {
            tolerance: 1e-8,
            max_iterations: 50,
        }
    }
}

/// Index arithmetic for the unknown vector and the equation rows.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub n: usize,
    pub m: usize,
}

impl Layout {
    pub fn of(model: &GridModel) -> Self {
        Layout {
            n: model.n_ac(),
            m: model.n_dc(),
        }
    }
    pub fn dim(&self) -> usize {
        2 * self.n + self.m
    }
    pub fn vm(&self, i: usize) -> usize {
        i
    }
    pub fn va(&self, i: usize) -> usize {
        self.n + i
    }
    /// Column/row of the DC unknown for unified node index `u`.
    pub fn e(&self, u: usize) -> usize {
        self.n + u
    }
}

/// Operating point unpacked from the unknown vector.
#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    pub e: Vec<f64>,
}

impl Point {
    pub fn from_state(state: &GridState) -> Self {
        Point {
            vm: state.e_ac.iter().map(|e| e.norm()).collect(),
            va: state.e_ac.iter().map(|e| e.arg()).collect(),
            e: state.e_dc.clone(),
        }
    }

    fn from_x(l: &Layout, x: &DVector<f64>) -> Self {
        Point {
            vm: x.rows(0, l.n).iter().copied().collect(),
            va: x.rows(l.n, l.n).iter().copied().collect(),
            e: x.rows(2 * l.n, l.m).iter().copied().collect(),
        }
    }

    fn to_x(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.vm.len() * 2 + self.e.len(),
            self.vm.iter().chain(&self.va).chain(&self.e).copied(),
        )
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        self.vm
            .iter()
            .zip(&self.va)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }

    /// Magnitude at a unified node.
    pub fn mag(&self, u: usize) -> f64 {
        if u < self.vm.len() {
            self.vm[u]
        } else {
            self.e[u - self.vm.len()]
        }
    }

    fn to_state(&self, model: &GridModel, timestamp: u64) -> GridState {
        GridState::from_voltages(model, self.phasors(), self.e.clone(), timestamp)
    }
}

/// Network injections and their partial derivatives with respect to `x`.
///
/// With `F_in = E_i Y*_in E*_n` (and `F_jm = E_j G_jm E_m` on the DC side)
/// every partial derivative of `P + jQ` follows from
/// `dF_in = F_in (d|E_i|/|E_i| + d|E_n|/|E_n| + j(dθ_i − dθ_n))`.
pub(crate) struct Injections {
    /// Active injection per unified node.
    pub p: Vec<f64>,
    /// Reactive injection per AC node.
    pub q: Vec<f64>,
    pub dp: DMatrix<f64>,
    pub dq: DMatrix<f64>,
}

pub(crate) fn injections(model: &GridModel, pt: &Point) -> Injections {
    let l = Layout::of(model);
    let e_ac = pt.phasors();
    let mut p = vec![0.0; l.n + l.m];
    let mut q = vec![0.0; l.n];
    let mut dp = DMatrix::zeros(l.n + l.m, l.dim());
    let mut dq = DMatrix::zeros(l.n, l.dim());
    let y = model.y_ac();
    for i in 0..l.n {
        for k in 0..l.n {
            let yik = y[(i, k)];
            if yik.re == 0.0 && yik.im == 0.0 {
                continue;
            }
            let f = e_ac[i] * yik.conj() * e_ac[k].conj();
            p[i] += f.re;
            q[i] += f.im;
            dp[(i, l.vm(i))] += f.re / pt.vm[i];
            dp[(i, l.vm(k))] += f.re / pt.vm[k];
            dq[(i, l.vm(i))] += f.im / pt.vm[i];
            dq[(i, l.vm(k))] += f.im / pt.vm[k];
            if k != i {
                dp[(i, l.va(i))] -= f.im;
                dp[(i, l.va(k))] += f.im;
                dq[(i, l.va(i))] += f.re;
                dq[(i, l.va(k))] -= f.re;
            }
        }
    }
    let g = model.y_dc();
    for j in 0..l.m {
        for k in 0..l.m {
            let gjk = g[(j, k)];
            if gjk == 0.0 {
                continue;
            }
            let f = pt.e[j] * gjk * pt.e[k];
            p[l.n + j] += f;
            dp[(l.n + j, l.e(l.n + j))] += f / pt.e[j];
            dp[(l.n + j, l.e(l.n + k))] += f / pt.e[k];
        }
    }
    Injections { p, q, dp, dq }
}

/// Converter loss and its partials with respect to the AC-side injection
/// `(P, Q)` and voltage magnitude.
pub(crate) fn ic_loss(loss: &IcLoss, p: f64, q: f64, vm: f64) -> (f64, [f64; 3]) {
    let s = libm::hypot(p, q);
    let i = s / vm;
    let value = loss.a0 + loss.a1 * i + loss.a2 * i * i + loss.filter_g * vm * vm;
    // |I| is not differentiable at zero current; its subgradient 0 is used.
    let (di_dp, di_dq) = if s > 0.0 { (p / (s * vm), q / (s * vm)) } else { (0.0, 0.0) };
    let di_dvm = -s / (vm * vm);
    let d = [
        loss.a1 * di_dp + loss.a2 * 2.0 * p / (vm * vm),
        loss.a1 * di_dq + loss.a2 * 2.0 * q / (vm * vm),
        loss.a1 * di_dvm - loss.a2 * 2.0 * s * s / (vm * vm * vm) + 2.0 * loss.filter_g * vm,
    ];
    (value, d)
}

/// Residual vector in the documented row order.
fn residual_at(model: &GridModel, spec: &PfSpec, pt: &Point, inj: &Injections) -> DVector<f64> {
    let l = Layout::of(model);
    let mut f = DVector::zeros(l.dim());
    let mut dct_inj = vec![0.0; l.n + l.m];
    for d in model.dcts() {
        let pw = d.power(pt.mag(d.primary), pt.mag(d.secondary), spec.dct_fidelity);
        dct_inj[d.primary] += pw.p1;
        dct_inj[d.secondary] += pw.p2;
    }
    for (u, node) in model.nodes().iter().enumerate() {
        let sp = &spec.nodes[u];
        let (p, q, v, a) = (
            sp.p.unwrap_or(0.0),
            sp.q.unwrap_or(0.0),
            sp.v.unwrap_or(0.0),
            sp.angle.unwrap_or(0.0),
        );
        match node.kind {
            NodeKind::AcSlack => {
                f[u] = pt.vm[u] - v;
                f[l.n + u] = pt.va[u] - a;
            }
            NodeKind::AcPq | NodeKind::IcAc(IcMode::PacQac) => {
                f[u] = inj.p[u] - p;
                f[l.n + u] = inj.q[u] - q;
            }
            NodeKind::AcPv => {
                f[u] = inj.p[u] - p;
                f[l.n + u] = pt.vm[u] - v;
            }
            NodeKind::IcAc(IcMode::EdcQac) => {
                f[u] = ic_balance(model, u, pt, inj);
                f[l.n + u] = inj.q[u] - q;
            }
            NodeKind::DcP => f[l.e(u)] = inj.p[u] - p - dct_inj[u],
            NodeKind::DcV | NodeKind::IcDc(IcMode::EdcQac) => f[l.e(u)] = pt.mag(u) - v,
            NodeKind::IcDc(IcMode::PacQac) => f[l.e(u)] = ic_balance(model, u, pt, inj),
        }
    }
    f
}

/// `P_l + P_k + loss` for the converter owning node `u`.
fn ic_balance(model: &GridModel, u: usize, pt: &Point, inj: &Injections) -> f64 {
    let ic = model.ic_of_node(u).expect("validated IC node");
    let (loss, _) = ic_loss(&ic.loss, inj.p[ic.ac], inj.q[ic.ac], pt.vm[ic.ac]);
    inj.p[ic.ac] + inj.p[ic.dc] + loss
}

fn ic_balance_row(model: &GridModel, u: usize, pt: &Point, inj: &Injections) -> DVector<f64> {
    let l = Layout::of(model);
    let ic = model.ic_of_node(u).expect("validated IC node");
    let (_, d) = ic_loss(&ic.loss, inj.p[ic.ac], inj.q[ic.ac], pt.vm[ic.ac]);
    let mut row: DVector<f64> = inj.dp.row(ic.ac).transpose() * (1.0 + d[0]) + inj.dp.row(ic.dc).transpose();
    row += inj.dq.row(ic.ac).transpose() * d[1];
    row[l.vm(ic.ac)] += d[2];
    row
}

/// Jacobian of the residual. `dct` selects the DC transformer model whose
/// voltage dependence is included; `None` treats DCT injections as fixed.
pub(crate) fn jacobian_at(model: &GridModel, pt: &Point, inj: &Injections, dct: Option<Fidelity>) -> DMatrix<f64> {
    let l = Layout::of(model);
    let mut j = DMatrix::zeros(l.dim(), l.dim());
    for (u, node) in model.nodes().iter().enumerate() {
        match node.kind {
            NodeKind::AcSlack => {
                j[(u, l.vm(u))] = 1.0;
                j[(l.n + u, l.va(u))] = 1.0;
            }
            NodeKind::AcPq | NodeKind::IcAc(IcMode::PacQac) => {
                j.row_mut(u).copy_from(&inj.dp.row(u));
                j.row_mut(l.n + u).copy_from(&inj.dq.row(u));
            }
            NodeKind::AcPv => {
                j.row_mut(u).copy_from(&inj.dp.row(u));
                j[(l.n + u, l.vm(u))] = 1.0;
            }
            NodeKind::IcAc(IcMode::EdcQac) => {
                j.row_mut(u).copy_from(&ic_balance_row(model, u, pt, inj).transpose());
                j.row_mut(l.n + u).copy_from(&inj.dq.row(u));
            }
            NodeKind::DcP => j.row_mut(l.e(u)).copy_from(&inj.dp.row(u)),
            NodeKind::DcV | NodeKind::IcDc(IcMode::EdcQac) => j[(l.e(u), l.e(u))] = 1.0,
            NodeKind::IcDc(IcMode::PacQac) => {
                j.row_mut(l.e(u)).copy_from(&ic_balance_row(model, u, pt, inj).transpose())
            }
        }
    }
    if let Some(fid) = dct {
        for d in model.dcts() {
            let jac = d.jacobian(pt.mag(d.primary), pt.mag(d.secondary), fid);
            let (r1, r2) = (l.e(d.primary), l.e(d.secondary));
            let (c1, c2) = (l.e(d.primary), l.e(d.secondary));
            j[(r1, c1)] -= jac.dp1[0];
            j[(r1, c2)] -= jac.dp1[1];
            j[(r2, c1)] -= jac.dp2[0];
            j[(r2, c2)] -= jac.dp2[1];
        }
    }
    j
}

/// Human-readable name of an equation row, for error reports.
pub fn equation_label(model: &GridModel, row: usize) -> String {
    let n = model.n_ac();
    let (u, second) = if row < n {
        (row, false)
    } else if row < 2 * n {
        (row - n, true)
    } else {
        (row - n, false)
    };
    let Some(node) = model.nodes().get(u) else {
        return format!("row {row}");
    };
    let what = match (node.kind, second) {
        (NodeKind::AcSlack, false) | (NodeKind::AcPv, true) => "voltage magnitude",
        (NodeKind::AcSlack, true) => "voltage angle",
        (NodeKind::IcAc(IcMode::EdcQac), false) | (NodeKind::IcDc(IcMode::PacQac), _) => "converter balance",
        (_, true) => "reactive power",
        (NodeKind::DcV | NodeKind::IcDc(IcMode::EdcQac), _) => "DC voltage",
        _ => "active power",
    };
    format!("{what} at `{}`", node.id)
}

/// Residual of `spec` at `state`, in Jacobian row order.
pub fn mismatch(model: &GridModel, spec: &PfSpec, state: &GridState) -> DVector<f64> {
    let pt = Point::from_state(state);
    let inj = injections(model, &pt);
    residual_at(model, spec, &pt, &inj)
}

/// Newton Jacobian of [`mismatch`] at `state`.
pub fn jacobian(model: &GridModel, spec: &PfSpec, state: &GridState) -> DMatrix<f64> {
    let pt = Point::from_state(state);
    let inj = injections(model, &pt);
    jacobian_at(model, &pt, &inj, Some(spec.dct_fidelity))
}

pub fn solve_pf(model: &GridModel, spec: &PfSpec, init: Option<&GridState>) -> Result<PfSolution, PfError> {
    solve_pf_with(model, spec, init, &PfOptions::default())
}

pub fn solve_pf_with(
    model: &GridModel,
    spec: &PfSpec,
    init: Option<&GridState>,
    opts: &PfOptions,
) -> Result<PfSolution, PfError> {
    spec.validate(model)?;
    let l = Layout::of(model);
    let mut pt = match init {
        Some(s) if s.e_ac.len() == l.n && s.e_dc.len() == l.m => Point::from_state(s),
        _ => Point {
            vm: vec![1.0; l.n],
            va: vec![0.0; l.n],
            e: vec![1.0; l.m],
        },
    };
    // Imposed quantities are exact from the start.
    for (u, sp) in spec.nodes.iter().enumerate() {
        if let Some(v) = sp.v {
            if u < l.n {
                pt.vm[u] = v;
            } else {
                pt.e[u - l.n] = v;
            }
        }
        if let Some(a) = sp.angle {
            pt.va[u] = a;
        }
    }
    let timestamp = init.map_or(0, |s| s.timestamp);

    let mut worst = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        let inj = injections(model, &pt);
        let f = residual_at(model, spec, &pt, &inj);
        worst = max_abs(f.as_slice());
        if !worst.is_finite() {
            break;
        }
        if worst <= opts.tolerance {
            return Ok(PfSolution {
                state: pt.to_state(model, timestamp),
                iterations: it,
                max_mismatch: worst,
                converged: true,
            });
        }
        let jac = jacobian_at(model, &pt, &inj, Some(spec.dct_fidelity));
        let lu = Lu::factor(&jac).map_err(|e| PfError::SingularJacobian {
            iteration: it,
            row: e.row,
            equation: equation_label(model, e.row),
        })?;
        let dx = lu.solve(&f);
        let x = pt.to_x() - dx;
        pt = Point::from_x(&l, &x);
    }
    Err(PfError::NotConverged {
        iterations: opts.max_iterations,
        max_mismatch: worst,
    })
}
