//! Hybrid AC/DC network model.
//!
//! Nodes are stored in a single unified order: all AC nodes first, then all DC
//! nodes. Every matrix and vector in the crate that spans both grids uses this
//! order, so the index of a node never changes after the model is built.
//!
//! Electrical quantities are per-unit internally. Line impedances, ampacities
//! and device ratings keep their SI values as given so that a model can be
//! written back out without any rounding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::devices::{DctDef, DctModel};
use crate::error::GridError;

/// Control mode of an interfacing converter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IcMode {
    /// Active and reactive power on the AC side are imposed.
    PacQac,
    /// DC voltage and AC reactive power are imposed.
    EdcQac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    AcSlack,
    AcPq,
    AcPv,
    IcAc(IcMode),
    IcDc(IcMode),
    DcP,
    DcV,
}

impl NodeKind {
    pub fn is_ac(self) -> bool {
        matches!(
            self,
            NodeKind::AcSlack | NodeKind::AcPq | NodeKind::AcPv | NodeKind::IcAc(_)
        )
    }

    /// Whether the node voltage is imposed (and therefore not an unknown).
    pub fn imposes_dc_voltage(self) -> bool {
        matches!(self, NodeKind::DcV | NodeKind::IcDc(IcMode::EdcQac))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Base {
    /// Three-phase base power (VA).
    pub s_va: f64,
    /// AC line-to-line base voltage (V).
    pub v_ac: f64,
    /// DC base voltage (V).
    pub v_dc: f64,
}

impl Base {
    pub fn z_ac(&self) -> f64 {
        self.v_ac * self.v_ac / self.s_va
    }

    pub fn z_dc(&self) -> f64 {
        self.v_dc * self.v_dc / self.s_va
    }

    /// AC base current (A), balanced three-phase.
    pub fn i_ac(&self) -> f64 {
        self.s_va / (libm::sqrt(3.0) * self.v_ac)
    }

    pub fn i_dc(&self) -> f64 {
        self.s_va / self.v_dc
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw * 1e3 / self.s_va
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.s_va / 1e3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub v_min: f64,
    pub v_max: f64,
    /// Voltage setpoint (p.u.) used where the kind imposes a voltage, and as the
    /// nominal value elsewhere.
    pub v_set: f64,
}

/// Converter loss polynomial, all coefficients per-unit.
///
/// `P_loss = a0 + a1 |I| + a2 |I|² + filter_g |E|²` where `I` is the AC-side
/// current and `E` the AC-side voltage of the converter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IcLoss {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub filter_g: f64,
}

impl IcLoss {
    pub fn is_lossless(&self) -> bool {
        self.a0 == 0.0 && self.a1 == 0.0 && self.a2 == 0.0 && self.filter_g == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcPair {
    pub id: String,
    /// Unified index of the AC terminal.
    pub ac: usize,
    /// Unified index of the DC terminal.
    pub dc: usize,
    pub mode: IcMode,
    pub rating_kva: f64,
    pub loss: IcLoss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Side {
    Ac,
    Dc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    /// Series reactance; `None` for DC lines.
    pub x_ohm: Option<f64>,
    pub ampacity_a: f64,
    y_pu: Complex64,
    ampacity_pu: f64,
}

impl Line {
    pub fn side(&self) -> Side {
        if self.x_ohm.is_some() {
            Side::Ac
        } else {
            Side::Dc
        }
    }

    /// Series admittance (p.u.). Purely real for DC lines.
    pub fn admittance(&self) -> Complex64 {
        self.y_pu
    }

    pub fn ampacity_pu(&self) -> f64 {
        self.ampacity_pu
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeviceKind {
    Pv { curtailable: bool },
    Load,
    Storage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub id: String,
    pub node: usize,
    pub kind: DeviceKind,
    pub rating_kva: f64,
}

/// Id-based description of a grid, as read from or written to a file.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDef {
    pub name: String,
    pub base: Base,
    pub ac_nodes: Vec<Node>,
    pub dc_nodes: Vec<Node>,
    pub ic_pairs: Vec<IcDef>,
    pub lines: Vec<LineDef>,
    pub devices: Vec<DeviceDef>,
    pub dcts: Vec<DctDef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcDef {
    pub id: String,
    pub ac: String,
    pub dc: String,
    pub rating_kva: f64,
    pub loss: IcLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineDef {
    pub id: String,
    pub from: String,
    pub to: String,
    pub r_ohm: f64,
    pub x_ohm: Option<f64>,
    pub ampacity_a: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDef {
    pub id: String,
    pub node: String,
    pub kind: DeviceKind,
    pub rating_kva: f64,
}

/// A validated hybrid AC/DC network. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    pub name: String,
    pub base: Base,
    nodes: Vec<Node>,
    n_ac: usize,
    lines: Vec<Line>,
    ic_pairs: Vec<IcPair>,
    devices: Vec<Device>,
    dcts: Vec<DctModel>,
    index: BTreeMap<String, usize>,
    y_ac: DMatrix<Complex64>,
    y_dc: DMatrix<f64>,
}

/// Current through a branch, oriented from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BranchCurrent {
    Ac(Complex64),
    Dc(f64),
}

impl BranchCurrent {
    pub fn magnitude(&self) -> f64 {
        match self {
            BranchCurrent::Ac(i) => i.norm(),
            BranchCurrent::Dc(i) => i.abs(),
        }
    }
}

fn invalid_node(node: &Node, reason: &str) -> GridError {
    GridError::InvalidNode {
        node: node.id.clone(),
        reason: reason.to_string(),
    }
}

impl GridModel {
    pub fn from_def(def: &GridDef) -> Result<Self, GridError> {
        let base = def.base;
        if !(base.s_va > 0.0 && base.v_ac > 0.0 && base.v_dc > 0.0) {
            return Err(GridError::InvalidBase(format!("{base:?}")));
        }

        let mut nodes = Vec::with_capacity(def.ac_nodes.len() + def.dc_nodes.len());
        let mut index = BTreeMap::new();
        for (ac, list) in [(true, &def.ac_nodes), (false, &def.dc_nodes)] {
            for node in list.iter() {
                if node.kind.is_ac() != ac {
                    return Err(invalid_node(
                        node,
                        if ac {
                            "listed as AC node but has a DC kind"
                        } else {
                            "listed as DC node but has an AC kind"
                        },
                    ));
                }
                if !(node.v_min > 0.0 && node.v_min < node.v_max) {
                    return Err(invalid_node(node, "voltage limits must satisfy 0 < v_min < v_max"));
                }
                if !(node.v_set > 0.0) {
                    return Err(invalid_node(node, "voltage setpoint must be positive"));
                }
                if index.insert(node.id.clone(), nodes.len()).is_some() {
                    return Err(GridError::DuplicateId(node.id.clone()));
                }
                nodes.push(node.clone());
            }
        }
        let n_ac = def.ac_nodes.len();
        let n_dc = def.dc_nodes.len();
        let lookup = |id: &str| index.get(id).copied().ok_or_else(|| GridError::UnknownNode(id.to_string()));

        let mut line_ids = BTreeMap::new();
        let mut lines = Vec::with_capacity(def.lines.len());
        for l in &def.lines {
            let bad = |reason: &str| GridError::InvalidLine {
                line: l.id.clone(),
                reason: reason.to_string(),
            };
            if line_ids.insert(l.id.clone(), lines.len()).is_some() {
                return Err(GridError::DuplicateId(l.id.clone()));
            }
            let from = lookup(&l.from)?;
            let to = lookup(&l.to)?;
            if from == to {
                return Err(bad("both ends on the same node"));
            }
            let from_ac = from < n_ac;
            if from_ac != (to < n_ac) {
                return Err(bad("connects an AC node to a DC node"));
            }
            if from_ac != l.x_ohm.is_some() {
                return Err(bad(if from_ac {
                    "AC line requires a reactance"
                } else {
                    "DC line must not carry a reactance"
                }));
            }
            if !(l.ampacity_a > 0.0) {
                return Err(bad("ampacity must be positive"));
            }
            if !(l.r_ohm >= 0.0) || l.x_ohm.is_some_and(|x| !x.is_finite()) {
                return Err(bad("invalid impedance"));
            }
            let (y_pu, ampacity_pu) = if from_ac {
                let z = Complex64::new(l.r_ohm, l.x_ohm.unwrap_or(0.0)) / base.z_ac();
                if z.norm() == 0.0 {
                    return Err(bad("zero impedance"));
                }
                (z.inv(), l.ampacity_a / base.i_ac())
            } else {
                if l.r_ohm == 0.0 {
                    return Err(bad("zero resistance"));
                }
                (Complex64::new(base.z_dc() / l.r_ohm, 0.0), l.ampacity_a / base.i_dc())
            };
            lines.push(Line {
                id: l.id.clone(),
                from,
                to,
                r_ohm: l.r_ohm,
                x_ohm: l.x_ohm,
                ampacity_a: l.ampacity_a,
                y_pu,
                ampacity_pu,
            });
        }

        let mut ic_pairs = Vec::with_capacity(def.ic_pairs.len());
        let mut ic_seen = vec![false; nodes.len()];
        for ic in &def.ic_pairs {
            let bad = |reason: &str| GridError::InvalidIc {
                ic: ic.id.clone(),
                reason: reason.to_string(),
            };
            let ac = lookup(&ic.ac)?;
            let dc = lookup(&ic.dc)?;
            let (NodeKind::IcAc(m_ac), NodeKind::IcDc(m_dc)) = (nodes[ac].kind, nodes[dc].kind) else {
                return Err(bad("terminals must be an IC-AC node and an IC-DC node"));
            };
            if m_ac != m_dc {
                return Err(bad("AC and DC terminals carry different control modes"));
            }
            if ic_seen[ac] || ic_seen[dc] {
                return Err(bad("terminal already belongs to another converter"));
            }
            if !(ic.rating_kva > 0.0) {
                return Err(bad("rating must be positive"));
            }
            let lo = ic.loss;
            if [lo.a0, lo.a1, lo.a2, lo.filter_g].iter().any(|c| !(*c >= 0.0)) {
                return Err(bad("loss coefficients must be non-negative"));
            }
            ic_seen[ac] = true;
            ic_seen[dc] = true;
            ic_pairs.push(IcPair {
                id: ic.id.clone(),
                ac,
                dc,
                mode: m_ac,
                rating_kva: ic.rating_kva,
                loss: ic.loss,
            });
        }
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::IcAc(_) | NodeKind::IcDc(_)) && !ic_seen[i] {
                return Err(invalid_node(node, "interfacing-converter node without a converter pair"));
            }
        }

        let mut devices = Vec::with_capacity(def.devices.len());
        let mut device_ids = BTreeMap::new();
        for d in &def.devices {
            let bad = |reason: &str| GridError::InvalidDevice {
                device: d.id.clone(),
                reason: reason.to_string(),
            };
            if device_ids.insert(d.id.clone(), ()).is_some() {
                return Err(GridError::DuplicateId(d.id.clone()));
            }
            let node = lookup(&d.node)?;
            match nodes[node].kind {
                NodeKind::AcPq | NodeKind::DcP => {}
                _ => return Err(bad("devices attach to PQ or DC-P nodes only")),
            }
            if !(d.rating_kva > 0.0) {
                return Err(bad("rating must be positive"));
            }
            devices.push(Device {
                id: d.id.clone(),
                node,
                kind: d.kind,
                rating_kva: d.rating_kva,
            });
        }

        let mut dcts = Vec::with_capacity(def.dcts.len());
        for d in &def.dcts {
            if device_ids.insert(d.id.clone(), ()).is_some() {
                return Err(GridError::DuplicateId(d.id.clone()));
            }
            let primary = lookup(&d.primary)?;
            let secondary = lookup(&d.secondary)?;
            let bad = |reason: &str| GridError::InvalidDevice {
                device: d.id.clone(),
                reason: reason.to_string(),
            };
            if nodes[primary].kind != NodeKind::DcP || nodes[secondary].kind != NodeKind::DcP || primary == secondary {
                return Err(bad("DC transformer terminals must be two distinct DC-P nodes"));
            }
            if !(d.alpha_kw_per_v > 0.0) || !(d.r_equiv_ohm >= 0.0) || !(d.p_mag_loss_kw >= 0.0) {
                return Err(bad("requires alpha > 0, r_equiv >= 0 and p_mag_loss >= 0"));
            }
            if !(d.deadband_halfwidth_v >= 0.0) || !(d.rating_kw > 0.0) {
                return Err(bad("requires deadband >= 0 and rating > 0"));
            }
            dcts.push(DctModel::new(d.clone(), primary, secondary, &base));
        }

        let mut y_ac = DMatrix::from_element(n_ac, n_ac, Complex64::new(0.0, 0.0));
        let mut y_dc = DMatrix::zeros(n_dc, n_dc);
        for l in &lines {
            match l.side() {
                Side::Ac => {
                    let (i, k) = (l.from, l.to);
                    y_ac[(i, i)] += l.y_pu;
                    y_ac[(k, k)] += l.y_pu;
                    y_ac[(i, k)] -= l.y_pu;
                    y_ac[(k, i)] -= l.y_pu;
                }
                Side::Dc => {
                    let (i, k) = (l.from - n_ac, l.to - n_ac);
                    let g = l.y_pu.re;
                    y_dc[(i, i)] += g;
                    y_dc[(k, k)] += g;
                    y_dc[(i, k)] -= g;
                    y_dc[(k, i)] -= g;
                }
            }
        }
        check_symmetric(&y_ac.map(|c| c.re))?;
        check_symmetric(&y_ac.map(|c| c.im))?;
        check_symmetric(&y_dc).map_err(|e| match e {
            GridError::AsymmetricAdmittance { row, col } => GridError::AsymmetricAdmittance {
                row: row + n_ac,
                col: col + n_ac,
            },
            e => e,
        })?;

        let model = GridModel {
            name: def.name.clone(),
            base,
            nodes,
            n_ac,
            lines,
            ic_pairs,
            devices,
            dcts,
            index,
            y_ac,
            y_dc,
        };
        model.check_components()?;
        Ok(model)
    }

    /// Rebuilds the id-based description. `from_def(m.to_def())` reproduces `m`.
    pub fn to_def(&self) -> GridDef {
        let id = |i: usize| self.nodes[i].id.clone();
        GridDef {
            name: self.name.clone(),
            base: self.base,
            ac_nodes: self.nodes[..self.n_ac].to_vec(),
            dc_nodes: self.nodes[self.n_ac..].to_vec(),
            ic_pairs: self
                .ic_pairs
                .iter()
                .map(|ic| IcDef {
                    id: ic.id.clone(),
                    ac: id(ic.ac),
                    dc: id(ic.dc),
                    rating_kva: ic.rating_kva,
                    loss: ic.loss,
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineDef {
                    id: l.id.clone(),
                    from: id(l.from),
                    to: id(l.to),
                    r_ohm: l.r_ohm,
                    x_ohm: l.x_ohm,
                    ampacity_a: l.ampacity_a,
                })
                .collect(),
            devices: self
                .devices
                .iter()
                .map(|d| DeviceDef {
                    id: d.id.clone(),
                    node: id(d.node),
                    kind: d.kind,
                    rating_kva: d.rating_kva,
                })
                .collect(),
            dcts: self.dcts.iter().map(|d| d.def.clone()).collect(),
        }
    }

    fn check_components(&self) -> Result<(), GridError> {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for l in &self.lines {
            let (a, b) = (find(&mut parent, l.from), find(&mut parent, l.to));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut slack_count: BTreeMap<usize, usize> = BTreeMap::new();
        let mut dc_ref: BTreeMap<usize, bool> = BTreeMap::new();
        for i in 0..n {
            let root = find(&mut parent, i);
            let kind = self.nodes[i].kind;
            if kind.is_ac() {
                *slack_count.entry(root).or_default() += usize::from(kind == NodeKind::AcSlack);
            } else {
                *dc_ref.entry(root).or_default() |= kind.imposes_dc_voltage();
            }
        }
        for (root, count) in slack_count {
            if count != 1 {
                return Err(GridError::SlackCount {
                    node: self.nodes[root].id.clone(),
                    count,
                });
            }
        }
        for (root, ok) in dc_ref {
            if !ok {
                return Err(GridError::NoDcVoltageReference(self.nodes[root].id.clone()));
            }
        }
        Ok(())
    }

    pub fn n_ac(&self) -> usize {
        self.n_ac
    }

    pub fn n_dc(&self) -> usize {
        self.nodes.len() - self.n_ac
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, unified: usize) -> &Node {
        &self.nodes[unified]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn is_ac(&self, unified: usize) -> bool {
        unified < self.n_ac
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn line_index(&self, id: &str) -> Option<usize> {
        self.lines.iter().position(|l| l.id == id)
    }

    pub fn ic_pairs(&self) -> &[IcPair] {
        &self.ic_pairs
    }

    /// Converter pair owning the given unified node, if any.
    pub fn ic_of_node(&self, unified: usize) -> Option<&IcPair> {
        self.ic_pairs.iter().find(|ic| ic.ac == unified || ic.dc == unified)
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device(&self, id: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.id == id)
    }

    pub fn dcts(&self) -> &[DctModel] {
        &self.dcts
    }

    pub fn y_ac(&self) -> &DMatrix<Complex64> {
        &self.y_ac
    }

    pub fn y_dc(&self) -> &DMatrix<f64> {
        &self.y_dc
    }

    /// Copy of the model with every converter made lossless.
    pub fn without_ic_losses(&self) -> Self {
        let mut m = self.clone();
        for ic in &mut m.ic_pairs {
            ic.loss = IcLoss::default();
        }
        m
    }

    /// Copy of the model without DC transformers.
    pub fn without_dcts(&self) -> Self {
        let mut m = self.clone();
        m.dcts.clear();
        m
    }

    /// Copy of the model with every DCT deadband set to `halfwidth_v` volts.
    pub fn with_dct_deadband(&self, halfwidth_v: f64) -> Self {
        let mut m = self.clone();
        for d in &mut m.dcts {
            d.def.deadband_halfwidth_v = halfwidth_v;
            d.deadband = halfwidth_v / self.base.v_dc;
        }
        m
    }

    /// `diag(Y_ac, Y_dc)` over the unified node order.
    pub fn unified_admittance(&self) -> DMatrix<Complex64> {
        let n = self.nodes.len();
        let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        y.view_mut((0, 0), (self.n_ac, self.n_ac)).copy_from(&self.y_ac);
        let n_dc = self.n_dc();
        for i in 0..n_dc {
            for k in 0..n_dc {
                y[(self.n_ac + i, self.n_ac + k)] = Complex64::new(self.y_dc[(i, k)], 0.0);
            }
        }
        y
    }

    /// Current of line `idx` flowing from its `from` node towards its `to` node.
    pub fn line_current(&self, state: &GridState, idx: usize) -> BranchCurrent {
        let l = &self.lines[idx];
        match l.side() {
            Side::Ac => BranchCurrent::Ac(l.y_pu * (state.e_ac[l.from] - state.e_ac[l.to])),
            Side::Dc => {
                let (i, k) = (l.from - self.n_ac, l.to - self.n_ac);
                BranchCurrent::Dc(l.y_pu.re * (state.e_dc[i] - state.e_dc[k]))
            }
        }
    }

    pub fn branch_current(&self, state: &GridState, id: &str) -> Result<BranchCurrent, GridError> {
        let idx = self
            .line_index(id)
            .ok_or_else(|| GridError::UnknownBranch(id.to_string()))?;
        Ok(self.line_current(state, idx))
    }

    /// Converts a line current magnitude (p.u.) to amps on its own grid side.
    pub fn current_to_amps(&self, idx: usize, pu: f64) -> f64 {
        match self.lines[idx].side() {
            Side::Ac => pu * self.base.i_ac(),
            Side::Dc => pu * self.base.i_dc(),
        }
    }
}

/// Checks a real matrix for exact symmetry.
pub fn check_symmetric(m: &DMatrix<f64>) -> Result<(), GridError> {
    for i in 0..m.nrows() {
        for k in 0..i {
            if m[(i, k)] != m[(k, i)] || !m[(i, k)].is_finite() {
                return Err(GridError::AsymmetricAdmittance { row: i, col: k });
            }
        }
    }
    Ok(())
}

/// Operating point of the network: voltages and the injections they imply.
///
/// `p` and `q` are net injections into the network (generator convention)
/// over the unified node order; `q` is zero at every DC node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub e_ac: Vec<Complex64>,
    pub e_dc: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub timestamp: u64,
}

impl GridState {
    /// Builds a state from voltages, computing the injections from the
    /// admittance matrices.
    pub fn from_voltages(model: &GridModel, e_ac: Vec<Complex64>, e_dc: Vec<f64>, timestamp: u64) -> Self {
        assert_eq!(e_ac.len(), model.n_ac());
        assert_eq!(e_dc.len(), model.n_dc());
        let n_ac = model.n_ac();
        let mut p = vec![0.0; model.n_nodes()];
        let mut q = vec![0.0; model.n_nodes()];
        let y = model.y_ac();
        for i in 0..n_ac {
            let mut cur = Complex64::new(0.0, 0.0);
            for k in 0..n_ac {
                cur += y[(i, k)] * e_ac[k];
            }
            let s = e_ac[i] * cur.conj();
            p[i] = s.re;
            q[i] = s.im;
        }
        let g = model.y_dc();
        for j in 0..e_dc.len() {
            let cur: f64 = (0..e_dc.len()).map(|m| g[(j, m)] * e_dc[m]).sum();
            p[n_ac + j] = e_dc[j] * cur;
        }
        GridState {
            e_ac,
            e_dc,
            p,
            q,
            timestamp,
        }
    }

    /// Nominal voltages everywhere (1.0∠0 AC, 1.0 DC).
    pub fn flat(model: &GridModel) -> Self {
        Self::from_voltages(
            model,
            vec![Complex64::new(1.0, 0.0); model.n_ac()],
            vec![1.0; model.n_dc()],
            0,
        )
    }

    /// Voltage magnitude at a unified node.
    pub fn vm(&self, unified: usize) -> f64 {
        if unified < self.e_ac.len() {
            self.e_ac[unified].norm()
        } else {
            self.e_dc[unified - self.e_ac.len()]
        }
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        (0..self.e_ac.len() + self.e_dc.len()).map(|i| self.vm(i)).collect()
    }

    /// Total network losses `Σ Re{E I*}` over every node of both grids.
    pub fn network_p_losses(&self) -> f64 {
        self.p.iter().sum()
    }

    /// Reactive power absorbed by the AC network.
    pub fn network_q_losses(&self) -> f64 {
        self.q[..self.e_ac.len()].iter().sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        let n_ac = self.e_ac.len();
        if let Some(j) = self.q[n_ac..].iter().position(|q| *q != 0.0) {
            return Err(format!("non-zero reactive power at DC node {j}"));
        }
        if let Some(i) = (0..n_ac + self.e_dc.len()).find(|&i| !(self.vm(i) > 0.0)) {
            return Err(format!("non-positive voltage magnitude at node {i}"));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::devices::DctDef;

    pub fn node(id: &str, kind: NodeKind) -> Node {
        Node {
            id: id.into(),
            kind,
            v_min: 0.9,
            v_max: 1.1,
            v_set: 1.0,
        }
    }

    pub fn line(id: &str, from: &str, to: &str, r: f64, x: Option<f64>) -> LineDef {
        LineDef {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            r_ohm: r,
            x_ohm: x,
            ampacity_a: 100.0,
        }
    }

    pub fn per_unit_base() -> Base {
        // Unit impedance base so that ohms equal per-unit values.
        Base {
            s_va: 1.0,
            v_ac: 1.0,
            v_dc: 1.0,
        }
    }

    pub fn two_bus() -> GridDef {
        GridDef {
            name: "two-bus".into(),
            base: per_unit_base(),
            ac_nodes: vec![node("A1", NodeKind::AcSlack), node("A2", NodeKind::AcPq)],
            dc_nodes: vec![],
            ic_pairs: vec![],
            lines: vec![line("L12", "A1", "A2", 0.01, Some(0.1))],
            devices: vec![],
            dcts: vec![],
        }
    }

    /// Small hybrid grid: 3 AC nodes, 3 DC nodes, two converters in different modes.
    pub fn small_hybrid() -> GridDef {
        GridDef {
            name: "small-hybrid".into(),
            base: per_unit_base(),
            ac_nodes: vec![
                node("S", NodeKind::AcSlack),
                node("A", NodeKind::AcPq),
                node("G", NodeKind::AcPv),
                node("C1", NodeKind::IcAc(IcMode::EdcQac)),
                node("C2", NodeKind::IcAc(IcMode::PacQac)),
            ],
            dc_nodes: vec![
                node("D1", NodeKind::IcDc(IcMode::EdcQac)),
                node("D2", NodeKind::IcDc(IcMode::PacQac)),
                node("P", NodeKind::DcP),
                node("V", NodeKind::DcV),
            ],
            ic_pairs: vec![
                IcDef {
                    id: "IC1".into(),
                    ac: "C1".into(),
                    dc: "D1".into(),
                    rating_kva: 1.0,
                    loss: IcLoss {
                        a0: 0.002,
                        a1: 0.01,
                        a2: 0.03,
                        filter_g: 0.001,
                    },
                },
                IcDef {
                    id: "IC2".into(),
                    ac: "C2".into(),
                    dc: "D2".into(),
                    rating_kva: 1.0,
                    loss: IcLoss {
                        a0: 0.001,
                        a1: 0.02,
                        a2: 0.01,
                        filter_g: 0.0,
                    },
                },
            ],
            lines: vec![
                line("SA", "S", "A", 0.02, Some(0.06)),
                line("AG", "A", "G", 0.03, Some(0.08)),
                line("AC1", "A", "C1", 0.01, Some(0.04)),
                line("SC2", "S", "C2", 0.02, Some(0.05)),
                line("D1P", "D1", "P", 0.02, None),
                line("PD2", "P", "D2", 0.03, None),
                line("PV", "P", "V", 0.05, None),
            ],
            devices: vec![],
            dcts: vec![],
        }
    }

    #[test]
    fn two_bus_counts() {
        let m = GridModel::from_def(&two_bus()).unwrap();
        assert_eq!((m.n_ac(), m.n_dc(), m.ic_pairs().len()), (2, 0, 0));
        assert_eq!(m.unified_admittance(), *m.y_ac());
    }

    #[test]
    fn unified_rows_sum_to_zero() {
        let m = GridModel::from_def(&small_hybrid()).unwrap();
        let y = m.unified_admittance();
        assert_eq!(y.nrows(), 9);
        for i in 0..y.nrows() {
            let s: Complex64 = y.row(i).iter().sum();
            assert!(s.norm() < 1e-12);
        }
        // no coupling between the blocks
        for i in 0..5 {
            for j in 5..9 {
                assert_eq!(y[(i, j)], Complex64::new(0.0, 0.0));
                assert_eq!(y[(j, i)], Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn dc_island_without_reference_is_rejected() {
        let mut def = small_hybrid();
        // cut the DC grid so that V and P form an island without voltage control
        def.lines.retain(|l| l.id != "D1P" && l.id != "PD2");
        def.lines.push(line("D1D2", "D1", "D2", 0.02, None));
        def.dc_nodes[3].kind = NodeKind::DcP;
        let err = GridModel::from_def(&def).unwrap_err();
        assert!(matches!(err, GridError::NoDcVoltageReference(_)), "{err:?}");
    }

    #[test]
    fn missing_slack_is_rejected() {
        let mut def = two_bus();
        def.ac_nodes[0].kind = NodeKind::AcPq;
        assert!(matches!(
            GridModel::from_def(&def).unwrap_err(),
            GridError::SlackCount { count: 0, .. }
        ));
    }

    #[test]
    fn mismatched_ic_modes_are_rejected() {
        let mut def = small_hybrid();
        def.dc_nodes[0].kind = NodeKind::IcDc(IcMode::PacQac);
        def.dc_nodes[1].kind = NodeKind::IcDc(IcMode::EdcQac);
        assert!(matches!(GridModel::from_def(&def).unwrap_err(), GridError::InvalidIc { .. }));
    }

    #[test]
    fn asymmetric_matrix_detected() {
        let mut m = DMatrix::from_element(3, 3, 1.0);
        m[(2, 0)] = 2.0;
        assert_eq!(check_symmetric(&m), Err(GridError::AsymmetricAdmittance { row: 2, col: 0 }));
    }

    #[test]
    fn def_round_trip() {
        let mut def = small_hybrid();
        def.dc_nodes.push(node("T2", NodeKind::DcP));
        def.lines.push(line("PT2", "P", "T2", 0.04, None));
        def.dcts.push(DctDef {
            id: "DCT".into(),
            primary: "P".into(),
            secondary: "T2".into(),
            alpha_kw_per_v: 0.826,
            r_equiv_ohm: 0.46,
            p_mag_loss_kw: 0.6,
            deadband_halfwidth_v: 0.5,
            rating_kw: 30.0,
        });
        let m = GridModel::from_def(&def).unwrap();
        assert_eq!(m.to_def(), def);
        assert_eq!(GridModel::from_def(&m.to_def()).unwrap(), m);
    }

    #[test]
    fn dc_branch_current() {
        let def = GridDef {
            name: "dc".into(),
            base: per_unit_base(),
            ac_nodes: vec![node("S", NodeKind::AcSlack)],
            dc_nodes: vec![node("J", NodeKind::DcV), node("M", NodeKind::DcP)],
            ic_pairs: vec![],
            lines: vec![line("JM", "J", "M", 0.01, None)],
            devices: vec![],
            dcts: vec![],
        };
        let m = GridModel::from_def(&def).unwrap();
        let s = GridState::from_voltages(&m, vec![Complex64::new(1.0, 0.0)], vec![1.0, 0.99], 0);
        let BranchCurrent::Dc(i) = m.branch_current(&s, "JM").unwrap() else {
            panic!("expected a DC current")
        };
        assert!((i - 1.0).abs() < 1e-12);
        assert!(matches!(m.branch_current(&s, "nope"), Err(GridError::UnknownBranch(_))));
        // equal voltages carry no current
        let s = GridState::from_voltages(&m, vec![Complex64::new(1.0, 0.0)], vec![1.0, 1.0], 0);
        assert_eq!(m.line_current(&s, 0), BranchCurrent::Dc(0.0));
    }
}
