//! CSV and JSON formats for states, power-flow specifications, profiles,
//! sensitivity matrices and admittance matrices.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use acdc_core::devices::ProfileSeries;
use acdc_core::power_flow::NodeSetpoint;
use acdc_core::{Fidelity, GridModel, GridState, PfSpec, ResourceProfile, SensitivityBundle};
use anyhow::{bail, ensure, Context, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRow {
    node_id: String,
    vm: f64,
    angle: f64,
    p: f64,
    q: f64,
}

/// `node_id, vm, angle, p, q` in p.u. and radians, one row per node.
pub fn write_state<W: Write>(model: &GridModel, state: &GridState, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (u, node) in model.nodes().iter().enumerate() {
        let angle = if model.is_ac(u) { state.e_ac[u].arg() } else { 0.0 };
        w.serialize(StateRow {
            node_id: node.id.clone(),
            vm: state.vm(u),
            angle,
            p: state.p[u],
            q: state.q[u],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_state<R: Read>(model: &GridModel, input: R) -> Result<GridState> {
    let n = model.n_nodes();
    let mut seen: Vec<Option<StateRow>> = (0..n).map(|_| None).collect();
    for row in csv::Reader::from_reader(input).deserialize() {
        let row: StateRow = row?;
        let u = model
            .node_index(&row.node_id)
            .with_context(|| format!("unknown node `{}` in state file", row.node_id))?;
        ensure!(seen[u].is_none(), "node `{}` listed twice", row.node_id);
        seen[u] = Some(row);
    }
    let mut rows = Vec::with_capacity(n);
    for (u, r) in seen.into_iter().enumerate() {
        rows.push(r.with_context(|| format!("state file lacks node `{}`", model.node(u).id))?);
    }
    let n_ac = model.n_ac();
    let state = GridState {
        e_ac: rows[..n_ac].iter().map(|r| Complex64::from_polar(r.vm, r.angle)).collect(),
        e_dc: rows[n_ac..].iter().map(|r| r.vm).collect(),
        p: rows.iter().map(|r| r.p).collect(),
        q: rows.iter().map(|r| r.q).collect(),
        timestamp: 0,
    };
    state.validate().map_err(anyhow::Error::msg)?;
    Ok(state)
}

pub fn save_state(model: &GridModel, state: &GridState, path: &Path) -> Result<()> {
    write_state(model, state, create(path)?)
}

pub fn load_state(model: &GridModel, path: &Path) -> Result<GridState> {
    read_state(model, open(path)?).with_context(|| format!("reading state {}", path.display()))
}

/// Power-flow specification file. Nodes not listed keep their nominal
/// specification (zero injections, imposed voltages at `v_set`).
///
/// ```json
/// { "dct_fidelity": "plant", "nodes": { "B03": { "p": -0.1, "q": -0.02 }, "B19": { "v": 1.01 } } }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    #[serde(default)]
    pub dct_fidelity: Fidelity,
    #[serde(default)]
    pub nodes: BTreeMap<String, SetpointDto>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetpointDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
}

impl SpecFile {
    pub fn to_spec(&self, model: &GridModel) -> Result<PfSpec> {
        let mut spec = PfSpec::nominal(model);
        spec.dct_fidelity = self.dct_fidelity;
        for (id, sp) in &self.nodes {
            let u = model.node_index(id).with_context(|| format!("unknown node `{id}` in spec"))?;
            let slot = &mut spec.nodes[u];
            let merge = |have: Option<f64>, new: Option<f64>| new.or(have);
            *slot = NodeSetpoint {
                p: merge(slot.p, sp.p),
                q: merge(slot.q, sp.q),
                v: merge(slot.v, sp.v),
                angle: merge(slot.angle, sp.angle),
            };
        }
        spec.validate(model)?;
        Ok(spec)
    }

    pub fn from_spec(model: &GridModel, spec: &PfSpec) -> Self {
        SpecFile {
            dct_fidelity: spec.dct_fidelity,
            nodes: model
                .nodes()
                .iter()
                .zip(&spec.nodes)
                .map(|(n, s)| {
                    (
                        n.id.clone(),
                        SetpointDto {
                            p: s.p,
                            q: s.q,
                            v: s.v,
                            angle: s.angle,
                        },
                    )
                })
                .collect(),
        }
    }
}

pub fn load_spec(model: &GridModel, path: &Path) -> Result<PfSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: SpecFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    file.to_spec(model)
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    t: usize,
    resource_id: String,
    #[serde(rename = "P_kW")]
    p_kw: f64,
    #[serde(rename = "Q_kvar")]
    q_kvar: f64,
    #[serde(rename = "P_mpp_kW")]
    p_mpp_kw: Option<f64>,
}

/// Profile CSV: `t, resource_id, P_kW, Q_kvar, P_mpp_kW` with the MPP column
/// left empty for resources without one. Every resource must cover
/// `t = 0 .. horizon` exactly once.
pub fn read_profile<R: Read>(model: &GridModel, input: R) -> Result<ResourceProfile> {
    let base = model.base;
    let mut rows: BTreeMap<String, BTreeMap<usize, (f64, f64, Option<f64>)>> = BTreeMap::new();
    for row in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input).deserialize() {
        let r: ProfileRow = row?;
        let series = rows.entry(r.resource_id.clone()).or_default();
        ensure!(
            series.insert(r.t, (r.p_kw, r.q_kvar, r.p_mpp_kw)).is_none(),
            "resource `{}` has two rows for t = {}",
            r.resource_id,
            r.t
        );
    }
    let horizon = rows.values().map(|s| s.len()).max().unwrap_or(0);
    ensure!(horizon > 0, "profile file is empty");
    let mut profile = ResourceProfile::new(horizon);
    for (id, series) in rows {
        ensure!(model.device(&id).is_some(), "profile names unknown resource `{id}`");
        ensure!(
            series.len() == horizon && series.keys().copied().eq(0..horizon),
            "resource `{id}` does not cover t = 0..{horizon}"
        );
        let with_mpp = series.values().filter(|v| v.2.is_some()).count();
        if with_mpp != 0 && with_mpp != horizon {
            bail!("resource `{id}` gives an MPP for some steps only");
        }
        profile.insert(
            &id,
            ProfileSeries {
                p: series.values().map(|v| base.kw_to_pu(v.0)).collect(),
                q: series.values().map(|v| base.kw_to_pu(v.1)).collect(),
                p_mpp: (with_mpp == horizon).then(|| series.values().map(|v| base.kw_to_pu(v.2.unwrap())).collect()),
            },
        )?;
    }
    Ok(profile)
}

pub fn write_profile<W: Write>(model: &GridModel, profile: &ResourceProfile, out: W) -> Result<()> {
    let base = model.base;
    let mut w = csv::Writer::from_writer(out);
    for t in 0..profile.horizon() {
        for id in profile.ids() {
            let s = profile.get(id).expect("listed id");
            w.serialize(ProfileRow {
                t,
                resource_id: id.to_string(),
                p_kw: base.pu_to_kw(s.p[t]),
                q_kvar: base.pu_to_kw(s.q[t]),
                p_mpp_kw: s.p_mpp.as_ref().map(|m| base.pu_to_kw(m[t])),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_profile(model: &GridModel, path: &Path) -> Result<ResourceProfile> {
    read_profile(model, open(path)?).with_context(|| format!("reading profiles {}", path.display()))
}

pub fn save_profile(model: &GridModel, profile: &ResourceProfile, path: &Path) -> Result<()> {
    write_profile(model, profile, create(path)?)
}

/// Sensitivity CSV: one row per output (`|E|@node`, `angle@node`, `I@line`,
/// `P_loss`, `Q_loss`), one column per controllable variable.
pub fn write_sc<W: Write>(model: &GridModel, bundle: &SensitivityBundle, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["output".to_string()];
    header.extend(bundle.variables.iter().map(|v| v.label(model)));
    w.write_record(&header)?;
    let mut row = |label: String, values: Vec<f64>| -> Result<()> {
        let mut rec = vec![label];
        rec.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
        Ok(())
    };
    let k_e = &bundle.voltage.k_e;
    for (u, node) in model.nodes().iter().enumerate() {
        row(format!("|E|@{}", node.id), k_e.row(u).iter().copied().collect())?;
    }
    for (u, node) in model.nodes().iter().enumerate().take(model.n_ac()) {
        row(
            format!("angle@{}", node.id),
            bundle.voltage.k_angle.row(u).iter().copied().collect(),
        )?;
    }
    for (k, line) in model.lines().iter().enumerate() {
        row(format!("I@{}", line.id), bundle.current.k_i.row(k).iter().copied().collect())?;
    }
    row("P_loss".into(), bundle.loss.k_ploss.iter().copied().collect())?;
    row("Q_loss".into(), bundle.loss.k_qloss.iter().copied().collect())?;
    w.flush()?;
    Ok(())
}

/// Parses the CSV written by [`write_sc`] into `(row labels, column labels, values)`.
pub fn read_sc<R: Read>(input: R) -> Result<(Vec<String>, Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_reader(input);
    let cols: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        labels.push(rec[0].to_string());
        for v in rec.iter().skip(1) {
            data.push(v.parse::<f64>()?);
        }
    }
    let m = DMatrix::from_row_slice(labels.len(), cols.len(), &data);
    Ok((labels, cols, m))
}

/// Which admittance matrix the `matrix` command writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    Unified,
    Ac,
    Dc,
}

/// Writes an admittance matrix with a header row of node ids. Complex
/// entries are written as `re+imj`.
pub fn write_matrix<W: Write>(model: &GridModel, which: MatrixKind, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ids: Vec<&str> = model.nodes().iter().map(|n| n.id.as_str()).collect();
    let (ids, cells): (&[&str], Vec<Vec<String>>) = match which {
        MatrixKind::Unified => (&ids[..], rows_complex(&model.unified_admittance())),
        MatrixKind::Ac => (&ids[..model.n_ac()], rows_complex(model.y_ac())),
        MatrixKind::Dc => {
            let y = model.y_dc();
            (
                &ids[model.n_ac()..],
                (0..y.nrows()).map(|i| y.row(i).iter().map(|v| v.to_string()).collect()).collect(),
            )
        }
    };
    w.write_record(ids)?;
    for row in cells {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn rows_complex(y: &DMatrix<Complex64>) -> Vec<Vec<String>> {
    (0..y.nrows())
        .map(|i| {
            y.row(i)
                .iter()
                .map(|c| {
                    let sign = if c.im.is_sign_negative() { '-' } else { '+' };
                    format!("{}{}{}j", c.re, sign, c.im.abs())
                })
                .collect()
        })
        .collect()
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
