//! Analytical sensitivity coefficients (SCs) of voltages, branch currents and
//! losses with respect to the controllable quantities of the grid.
//!
//! Differentiating the power-flow equations `f(x, X) = 0` with respect to a
//! specified quantity `X` gives `A ∂x/∂X = u(X)` where `A = ∂f/∂x` is the
//! power-flow Jacobian and `u` is the indicator of the row in which `X`
//! appears. `A` does not depend on `X`, so it is factorized once per operating
//! point and reused for every right-hand side.
//!
//! DC transformer injections are treated as ordinary DC-P injections here;
//! the controller couples them to the terminal voltages through its own
//! constraint rows.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::ScError;
use crate::grid::{GridModel, GridState, IcMode, NodeKind, Side};
use crate::linalg::Lu;
use crate::power_flow::{equation_label, injections, jacobian_at, Layout, Point};

/// Current magnitude below which the derivative of `|I|` is undefined.
pub const SMALL_CURRENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VarKind {
    /// Active power injection.
    P,
    /// Reactive power injection (AC only).
    Q,
    /// Imposed voltage: `|E|` at a PV node, `E` at a DC-V node or at a
    /// voltage-controlling converter.
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ControlVariable {
    pub kind: VarKind,
    /// Unified node index.
    pub node: usize,
}

impl ControlVariable {
    pub fn new(kind: VarKind, node: usize) -> Self {
        ControlVariable { kind, node }
    }

    pub fn is_valid(&self, model: &GridModel) -> bool {
        let Some(node) = model.nodes().get(self.node) else {
            return false;
        };
        match self.kind {
            VarKind::P => matches!(
                node.kind,
                NodeKind::AcPq | NodeKind::AcPv | NodeKind::IcAc(IcMode::PacQac) | NodeKind::DcP
            ),
            VarKind::Q => matches!(node.kind, NodeKind::AcPq | NodeKind::IcAc(_)),
            VarKind::V => matches!(
                node.kind,
                NodeKind::AcPv | NodeKind::DcV | NodeKind::IcDc(IcMode::EdcQac)
            ),
        }
    }

    pub fn validate(&self, model: &GridModel) -> Result<(), ScError> {
        if self.is_valid(model) {
            Ok(())
        } else {
            Err(ScError::InvalidVariable {
                variable: format!("{:?}", self.kind),
                node: model
                    .nodes()
                    .get(self.node)
                    .map_or_else(|| format!("#{}", self.node), |n| n.id.clone()),
            })
        }
    }

    /// `P@id`, `Q@id` or `E@id`.
    pub fn label(&self, model: &GridModel) -> String {
        let k = match self.kind {
            VarKind::P => "P",
            VarKind::Q => "Q",
            VarKind::V => "E",
        };
        format!("{k}@{}", model.node(self.node).id)
    }
}

/// Every controllable variable of the model, grouped by kind in node order.
pub fn all_variables(model: &GridModel) -> Vec<ControlVariable> {
    let mut out = Vec::new();
    for kind in [VarKind::P, VarKind::Q, VarKind::V] {
        for u in 0..model.n_nodes() {
            let v = ControlVariable::new(kind, u);
            if v.is_valid(model) {
                out.push(v);
            }
        }
    }
    out
}

/// `∂f/∂x` at `state`, without DC transformer voltage dependence.
pub fn assemble_a(model: &GridModel, state: &GridState) -> DMatrix<f64> {
    let pt = Point::from_state(state);
    let inj = injections(model, &pt);
    jacobian_at(model, &pt, &inj, None)
}

/// Right-hand side of `A ∂x/∂X = u` for one variable.
pub fn rhs_u(model: &GridModel, var: ControlVariable) -> Result<DVector<f64>, ScError> {
    var.validate(model)?;
    let l = Layout::of(model);
    let mut u = DVector::zeros(l.dim());
    let row = match (var.kind, model.is_ac(var.node)) {
        (VarKind::P, true) => var.node,
        (VarKind::Q, true) | (VarKind::V, true) => l.n + var.node,
        (_, false) => l.e(var.node),
    };
    u[row] = 1.0;
    Ok(u)
}

/// Derivatives of the unknown vector for each variable, one column each.
#[derive(Debug, Clone)]
pub struct VoltageSc {
    /// `∂|E|/∂X` over unified nodes (AC magnitude, DC voltage).
    pub k_e: DMatrix<f64>,
    /// `∂∠E/∂X` over AC nodes.
    pub k_angle: DMatrix<f64>,
    /// `∂x/∂X` in power-flow layout.
    pub dx: DMatrix<f64>,
    pub condition: f64,
}

pub fn voltage_sc(model: &GridModel, state: &GridState, variables: &[ControlVariable]) -> Result<VoltageSc, ScError> {
    let a = assemble_a(model, state);
    let lu = Lu::factor(&a).map_err(|e| ScError::SingularA {
        row: e.row,
        equation: equation_label(model, e.row),
        condition: f64::INFINITY,
    })?;
    let l = Layout::of(model);
    let mut rhs = DMatrix::zeros(l.dim(), variables.len());
    for (c, v) in variables.iter().enumerate() {
        rhs.set_column(c, &rhs_u(model, *v)?);
    }
    let mut dx = lu.solve_matrix(&rhs);
    // Identity rows pin their unknown to the right-hand side; restore the
    // exact value that elimination may have perturbed by rounding.
    for r in 0..l.dim() {
        let row = a.row(r);
        if let Some(c) = row.iter().position(|v| *v != 0.0) {
            if row[c] == 1.0 && row.iter().filter(|v| **v != 0.0).count() == 1 {
                for k in 0..variables.len() {
                    dx[(c, k)] = rhs[(r, k)];
                }
            }
        }
    }
    let mut k_e = DMatrix::zeros(l.n + l.m, variables.len());
    k_e.view_mut((0, 0), (l.n, variables.len()))
        .copy_from(&dx.view((0, 0), (l.n, variables.len())));
    k_e.view_mut((l.n, 0), (l.m, variables.len()))
        .copy_from(&dx.view((2 * l.n, 0), (l.m, variables.len())));
    let k_angle = dx.view((l.n, 0), (l.n, variables.len())).into_owned();
    Ok(VoltageSc {
        k_e,
        k_angle,
        dx,
        condition: lu.condition_estimate(),
    })
}

#[derive(Debug, Clone)]
pub struct CurrentSc {
    /// `∂|I|/∂X` for AC branches and `∂I/∂X` (signed) for DC branches.
    pub k_i: DMatrix<f64>,
    /// Anchor value: `|I|` for AC branches, signed `I` for DC branches.
    pub current: Vec<f64>,
    /// Branches whose current is below [`SMALL_CURRENT`]; their row holds the
    /// magnitude of the complex current derivative instead.
    pub flagged: Vec<bool>,
    /// Anchor current phasor of every branch (real on DC branches).
    pub phasor: Vec<Complex64>,
    /// `∂Re(I)/∂X` and `∂Im(I)/∂X`.
    pub k_re: DMatrix<f64>,
    pub k_im: DMatrix<f64>,
}

pub fn current_sc(model: &GridModel, state: &GridState, vsc: &VoltageSc) -> CurrentSc {
    let l = Layout::of(model);
    let nv = vsc.dx.ncols();
    let mut k_i = DMatrix::zeros(model.lines().len(), nv);
    let mut current = vec![0.0; model.lines().len()];
    let mut flagged = vec![false; model.lines().len()];
    let mut phasor = vec![Complex64::new(0.0, 0.0); model.lines().len()];
    let mut k_re = DMatrix::zeros(model.lines().len(), nv);
    let mut k_im = DMatrix::zeros(model.lines().len(), nv);
    let pt = Point::from_state(state);
    let e_ac = pt.phasors();
    // ∂E/∂X = e^{jθ} (∂|E| + j |E| ∂θ)
    let de = |i: usize, c: usize| -> Complex64 {
        let rot = e_ac[i] / pt.vm[i];
        rot * Complex64::new(vsc.dx[(l.vm(i), c)], pt.vm[i] * vsc.dx[(l.va(i), c)])
    };
    for (b, line) in model.lines().iter().enumerate() {
        let y = line.admittance();
        match line.side() {
            Side::Ac => {
                let cur = y * (e_ac[line.from] - e_ac[line.to]);
                let mag = cur.norm();
                current[b] = mag;
                phasor[b] = cur;
                flagged[b] = mag < SMALL_CURRENT;
                for c in 0..nv {
                    let di = y * (de(line.from, c) - de(line.to, c));
                    k_re[(b, c)] = di.re;
                    k_im[(b, c)] = di.im;
                    k_i[(b, c)] = if flagged[b] {
                        di.norm()
                    } else {
                        (cur.conj() * di).re / mag
                    };
                }
            }
            Side::Dc => {
                let g = y.re;
                current[b] = g * (pt.mag(line.from) - pt.mag(line.to));
                phasor[b] = Complex64::new(current[b], 0.0);
                for c in 0..nv {
                    k_i[(b, c)] = g * (vsc.dx[(l.e(line.from), c)] - vsc.dx[(l.e(line.to), c)]);
                    k_re[(b, c)] = k_i[(b, c)];
                }
            }
        }
    }
    CurrentSc {
        k_i,
        current,
        flagged,
        phasor,
        k_re,
        k_im,
    }
}

#[derive(Debug, Clone)]
pub struct LossSc {
    /// `∂P_i/∂X` for every unified node.
    pub k_p_inj: DMatrix<f64>,
    /// `∂Q_i/∂X` for every AC node.
    pub k_q_inj: DMatrix<f64>,
    pub k_ploss: DVector<f64>,
    pub k_qloss: DVector<f64>,
}

/// Loss SCs. The network losses equal the sum of all nodal injections, so
/// their derivative is the column sum of the injection SCs.
pub fn loss_sc(model: &GridModel, state: &GridState, vsc: &VoltageSc) -> LossSc {
    let pt = Point::from_state(state);
    let inj = injections(model, &pt);
    let k_p_inj = &inj.dp * &vsc.dx;
    let k_q_inj = &inj.dq * &vsc.dx;
    let k_ploss = k_p_inj.row_sum().transpose();
    let k_qloss = k_q_inj.row_sum().transpose();
    LossSc {
        k_p_inj,
        k_q_inj,
        k_ploss,
        k_qloss,
    }
}

/// Which output a K-matrix maps to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    Voltage,
    Current,
}

/// Every SC valid around one operating point.
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    pub variables: Vec<ControlVariable>,
    pub anchor: GridState,
    pub voltage: VoltageSc,
    pub current: CurrentSc,
    pub loss: LossSc,
    n_nodes: usize,
}

/// Linear prediction around a bundle's anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub vm: Vec<f64>,
    pub current: Vec<f64>,
    pub p_loss: f64,
    pub q_loss: f64,
}

impl SensitivityBundle {
    pub fn compute(model: &GridModel, state: &GridState, variables: &[ControlVariable]) -> Result<Self, ScError> {
        let voltage = voltage_sc(model, state, variables)?;
        let current = current_sc(model, state, &voltage);
        let loss = loss_sc(model, state, &voltage);
        let all_finite = voltage.dx.iter().chain(current.k_i.iter()).all(|v| v.is_finite());
        if !all_finite {
            return Err(ScError::SingularA {
                row: 0,
                equation: String::from("non-finite sensitivity"),
                condition: voltage.condition,
            });
        }
        Ok(SensitivityBundle {
            variables: variables.to_vec(),
            anchor: state.clone(),
            voltage,
            current,
            loss,
            n_nodes: model.n_nodes(),
        })
    }

    pub fn column(&self, var: ControlVariable) -> Option<usize> {
        self.variables.iter().position(|v| *v == var)
    }

    /// K-matrix with one column per unified node; columns of nodes without a
    /// variable of `kind` are zero.
    pub fn k_matrix(&self, output: Output, kind: VarKind) -> DMatrix<f64> {
        let src = match output {
            Output::Voltage => &self.voltage.k_e,
            Output::Current => &self.current.k_i,
        };
        let mut k = DMatrix::zeros(src.nrows(), self.n_nodes);
        for (c, v) in self.variables.iter().enumerate() {
            if v.kind == kind {
                k.set_column(v.node, &src.column(c));
            }
        }
        k
    }

    /// Loss SC row over unified nodes: `(∂P_loss/∂X, ∂Q_loss/∂X)`.
    pub fn k_loss(&self, kind: VarKind) -> (DVector<f64>, DVector<f64>) {
        let mut p = DVector::zeros(self.n_nodes);
        let mut q = DVector::zeros(self.n_nodes);
        for (c, v) in self.variables.iter().enumerate() {
            if v.kind == kind {
                p[v.node] = self.loss.k_ploss[c];
                q[v.node] = self.loss.k_qloss[c];
            }
        }
        (p, q)
    }

    /// First-order prediction `anchor + K Δ` for a delta per bundle variable.
    pub fn predict(&self, delta: &[f64]) -> Result<Prediction, ScError> {
        if delta.len() != self.variables.len() {
            return Err(ScError::DimensionMismatch {
                expected: self.variables.len(),
                got: delta.len(),
            });
        }
        let d = DVector::from_column_slice(delta);
        let dv = &self.voltage.k_e * &d;
        let di = &self.current.k_i * &d;
        Ok(Prediction {
            vm: self.anchor.magnitudes().iter().zip(dv.iter()).map(|(a, b)| a + b).collect(),
            current: self.current.current.iter().zip(di.iter()).map(|(a, b)| a + b).collect(),
            p_loss: self.anchor.network_p_losses() + self.loss.k_ploss.dot(&d),
            q_loss: self.anchor.network_q_losses() + self.loss.k_qloss.dot(&d),
        })
    }

    /// Prediction from node-indexed deltas of `P`, `Q` and imposed voltages.
    /// A non-zero delta at a node without the matching variable is an error.
    pub fn predict_nodal(&self, model: &GridModel, dp: &[f64], dq: &[f64], de: &[f64]) -> Result<Prediction, ScError> {
        let mut delta = vec![0.0; self.variables.len()];
        for (kind, src) in [(VarKind::P, dp), (VarKind::Q, dq), (VarKind::V, de)] {
            if src.len() != self.n_nodes {
                return Err(ScError::DimensionMismatch {
                    expected: self.n_nodes,
                    got: src.len(),
                });
            }
            for (u, &d) in src.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let c = self
                    .column(ControlVariable::new(kind, u))
                    .ok_or_else(|| ScError::MissingVariable {
                        node: model.node(u).id.clone(),
                    })?;
                delta[c] = d;
            }
        }
        self.predict(&delta)
    }
}
