//! JSON grid files.
//!
//! ```json
//! {
//!   "name": "demo",
//!   "base": { "s_va": 100000, "v_ac": 400, "v_dc": 800 },
//!   "ac_nodes": [{ "id": "B01", "kind": "slack" }, { "id": "B02", "kind": "pq" }],
//!   "dc_nodes": [{ "id": "B19", "kind": "ic", "mode": "edc_qac", "v_set": 1.0 }],
//!   "ic_pairs": [{ "id": "IC1", "ac": "B15", "dc": "B19", "rating_kva": 45 }],
//!   "lines": [{ "id": "L1", "from": "B01", "to": "B02", "r": 0.01, "x": 0.004, "ampacity_A": 200 }],
//!   "devices": [{ "type": "pv", "id": "roof", "node": "B11", "rating_kva": 16, "curtailable": true }]
//! }
//! ```
//!
//! Line impedances are in ohms; `x` is omitted on DC lines. Node limits
//! default to 0.95/1.05 p.u. and the setpoint to 1.0 p.u.

use std::fs;
use std::path::Path;

use acdc_core::devices::DctDef;
use acdc_core::grid::{Base, DeviceDef, DeviceKind, GridDef, IcDef, IcLoss, LineDef, Node};
use acdc_core::{GridModel, IcMode, NodeKind};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default)]
    pub name: String,
    pub base: BaseDto,
    pub ac_nodes: Vec<NodeDto>,
    #[serde(default)]
    pub dc_nodes: Vec<NodeDto>,
    #[serde(default)]
    pub ic_pairs: Vec<IcDto>,
    pub lines: Vec<LineDto>,
    #[serde(default)]
    pub devices: Vec<DeviceDto>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseDto {
    pub s_va: f64,
    pub v_ac: f64,
    pub v_dc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindDto {
    Slack,
    Pq,
    Pv,
    /// Converter terminal; the side follows from the node list it appears in.
    Ic,
    P,
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeDto {
    PacQac,
    EdcQac,
}

fn default_v_min() -> f64 {
    0.95
}
fn default_v_max() -> f64 {
    1.05
}
fn default_v_set() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDto {
    pub id: String,
    pub kind: KindDto,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeDto>,
    #[serde(default = "default_v_min")]
    pub v_min: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    #[serde(default = "default_v_set")]
    pub v_set: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossDto {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub filter_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcDto {
    pub id: String,
    pub ac: String,
    pub dc: String,
    pub rating_kva: f64,
    /// Loss polynomial in p.u.; lossless when omitted.
    #[serde(default)]
    pub loss: LossDto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineDto {
    pub id: String,
    pub from: String,
    pub to: String,
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(rename = "ampacity_A")]
    pub ampacity_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviceDto {
    Pv {
        id: String,
        node: String,
        rating_kva: f64,
        curtailable: bool,
    },
    Load {
        id: String,
        node: String,
        rating_kva: f64,
    },
    Storage {
        id: String,
        node: String,
        rating_kva: f64,
    },
    Dct {
        id: String,
        primary: String,
        secondary: String,
        alpha_kw_per_v: f64,
        r_equiv_ohm: f64,
        p_mag_loss_kw: f64,
        deadband_halfwidth_v: f64,
        rating_kw: f64,
    },
}

fn kind_of(n: &NodeDto, ac: bool) -> Result<NodeKind> {
    let mode = n.mode.map(|m| match m {
        ModeDto::PacQac => IcMode::PacQac,
        ModeDto::EdcQac => IcMode::EdcQac,
    });
    if n.kind != KindDto::Ic && mode.is_some() {
        bail!("node `{}`: only converter nodes take a mode", n.id);
    }
    Ok(match (n.kind, ac) {
        (KindDto::Slack, true) => NodeKind::AcSlack,
        (KindDto::Pq, true) => NodeKind::AcPq,
        (KindDto::Pv, true) => NodeKind::AcPv,
        (KindDto::Ic, true) => NodeKind::IcAc(mode.with_context(|| format!("node `{}` needs a mode", n.id))?),
        (KindDto::Ic, false) => NodeKind::IcDc(mode.with_context(|| format!("node `{}` needs a mode", n.id))?),
        (KindDto::P, false) => NodeKind::DcP,
        (KindDto::V, false) => NodeKind::DcV,
        (k, true) => bail!("node `{}`: kind {k:?} is not an AC kind", n.id),
        (k, false) => bail!("node `{}`: kind {k:?} is not a DC kind", n.id),
    })
}

fn node_dto(n: &Node) -> NodeDto {
    let (kind, mode) = match n.kind {
        NodeKind::AcSlack => (KindDto::Slack, None),
        NodeKind::AcPq => (KindDto::Pq, None),
        NodeKind::AcPv => (KindDto::Pv, None),
        NodeKind::IcAc(m) | NodeKind::IcDc(m) => (
            KindDto::Ic,
            Some(match m {
                IcMode::PacQac => ModeDto::PacQac,
                IcMode::EdcQac => ModeDto::EdcQac,
            }),
        ),
        NodeKind::DcP => (KindDto::P, None),
        NodeKind::DcV => (KindDto::V, None),
    };
    NodeDto {
        id: n.id.clone(),
        kind,
        mode,
        v_min: n.v_min,
        v_max: n.v_max,
        v_set: n.v_set,
    }
}

impl GridFile {
    pub fn to_def(&self) -> Result<GridDef> {
        let nodes = |list: &[NodeDto], ac: bool| -> Result<Vec<Node>> {
            list.iter()
                .map(|n| {
                    Ok(Node {
                        id: n.id.clone(),
                        kind: kind_of(n, ac)?,
                        v_min: n.v_min,
                        v_max: n.v_max,
                        v_set: n.v_set,
                    })
                })
                .collect()
        };
        let mut devices = Vec::new();
        let mut dcts = Vec::new();
        for d in &self.devices {
            match d.clone() {
                DeviceDto::Pv {
                    id,
                    node,
                    rating_kva,
                    curtailable,
                } => devices.push(DeviceDef {
                    id,
                    node,
                    kind: DeviceKind::Pv { curtailable },
                    rating_kva,
                }),
                DeviceDto::Load { id, node, rating_kva } => devices.push(DeviceDef {
                    id,
                    node,
                    kind: DeviceKind::Load,
                    rating_kva,
                }),
                DeviceDto::Storage { id, node, rating_kva } => devices.push(DeviceDef {
                    id,
                    node,
                    kind: DeviceKind::Storage,
                    rating_kva,
                }),
                DeviceDto::Dct {
                    id,
                    primary,
                    secondary,
                    alpha_kw_per_v,
                    r_equiv_ohm,
                    p_mag_loss_kw,
                    deadband_halfwidth_v,
                    rating_kw,
                } => dcts.push(DctDef {
                    id,
                    primary,
                    secondary,
                    alpha_kw_per_v,
                    r_equiv_ohm,
                    p_mag_loss_kw,
                    deadband_halfwidth_v,
                    rating_kw,
                }),
            }
        }
        Ok(GridDef {
            name: self.name.clone(),
            base: Base {
                s_va: self.base.s_va,
                v_ac: self.base.v_ac,
                v_dc: self.base.v_dc,
            },
            ac_nodes: nodes(&self.ac_nodes, true)?,
            dc_nodes: nodes(&self.dc_nodes, false)?,
            ic_pairs: self
                .ic_pairs
                .iter()
                .map(|ic| IcDef {
                    id: ic.id.clone(),
                    ac: ic.ac.clone(),
                    dc: ic.dc.clone(),
                    rating_kva: ic.rating_kva,
                    loss: IcLoss {
                        a0: ic.loss.a0,
                        a1: ic.loss.a1,
                        a2: ic.loss.a2,
                        filter_g: ic.loss.filter_g,
                    },
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineDef {
                    id: l.id.clone(),
                    from: l.from.clone(),
                    to: l.to.clone(),
                    r_ohm: l.r,
                    x_ohm: l.x,
                    ampacity_a: l.ampacity_a,
                })
                .collect(),
            devices,
            dcts,
        })
    }

    pub fn from_def(def: &GridDef) -> Self {
        let mut devices: Vec<DeviceDto> = def
            .devices
            .iter()
            .map(|d| match d.kind {
                DeviceKind::Pv { curtailable } => DeviceDto::Pv {
                    id: d.id.clone(),
                    node: d.node.clone(),
                    rating_kva: d.rating_kva,
                    curtailable,
                },
                DeviceKind::Load => DeviceDto::Load {
                    id: d.id.clone(),
                    node: d.node.clone(),
                    rating_kva: d.rating_kva,
                },
                DeviceKind::Storage => DeviceDto::Storage {
                    id: d.id.clone(),
                    node: d.node.clone(),
                    rating_kva: d.rating_kva,
                },
            })
            .collect();
        devices.extend(def.dcts.iter().map(|d| DeviceDto::Dct {
            id: d.id.clone(),
            primary: d.primary.clone(),
            secondary: d.secondary.clone(),
            alpha_kw_per_v: d.alpha_kw_per_v,
            r_equiv_ohm: d.r_equiv_ohm,
            p_mag_loss_kw: d.p_mag_loss_kw,
            deadband_halfwidth_v: d.deadband_halfwidth_v,
            rating_kw: d.rating_kw,
        }));
        GridFile {
            name: def.name.clone(),
            base: BaseDto {
                s_va: def.base.s_va,
                v_ac: def.base.v_ac,
                v_dc: def.base.v_dc,
            },
            ac_nodes: def.ac_nodes.iter().map(node_dto).collect(),
            dc_nodes: def.dc_nodes.iter().map(node_dto).collect(),
            ic_pairs: def
                .ic_pairs
                .iter()
                .map(|ic| IcDto {
                    id: ic.id.clone(),
                    ac: ic.ac.clone(),
                    dc: ic.dc.clone(),
                    rating_kva: ic.rating_kva,
                    loss: LossDto {
                        a0: ic.loss.a0,
                        a1: ic.loss.a1,
                        a2: ic.loss.a2,
                        filter_g: ic.loss.filter_g,
                    },
                })
                .collect(),
            lines: def
                .lines
                .iter()
                .map(|l| LineDto {
                    id: l.id.clone(),
                    from: l.from.clone(),
                    to: l.to.clone(),
                    r: l.r_ohm,
                    x: l.x_ohm,
                    ampacity_a: l.ampacity_a,
                })
                .collect(),
            devices,
        }
    }
}

pub fn parse_grid(json: &str) -> Result<GridModel> {
    let file: GridFile = serde_json::from_str(json).context("grid file does not match the schema")?;
    Ok(GridModel::from_def(&file.to_def()?)?)
}

pub fn load_grid(path: &Path) -> Result<GridModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_grid(&text).with_context(|| format!("loading grid {}", path.display()))
}

pub fn grid_to_json(model: &GridModel) -> String {
    serde_json::to_string_pretty(&GridFile::from_def(&model.to_def())).expect("grid serializes")
}

pub fn save_grid(model: &GridModel, path: &Path) -> Result<()> {
    fs::write(path, grid_to_json(model)).with_context(|| format!("writing {}", path.display()))
}
