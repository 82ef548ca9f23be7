use std::path::PathBuf;

use acdc::formats::{self, SpecFile};
use acdc::{grid_to_json, load_grid, parse_grid};
use acdc_core::devices::ProfileSeries;
use acdc_core::sensitivity::all_variables;
use acdc_core::{solve_pf, Fidelity, GridModel, PfSpec, ResourceProfile, SensitivityBundle};
use proptest::prelude::*;

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn epfl() -> GridModel {
    load_grid(&scenarios().join("epfl.json")).unwrap()
}

#[test]
fn grid_json_round_trips() {
    let m = epfl();
    let again = parse_grid(&grid_to_json(&m)).unwrap();
    assert_eq!(m, again);
    assert_eq!(m.n_ac(), 18);
    assert_eq!(m.n_dc(), 8);
    assert_eq!(m.dcts().len(), 1);
}

#[test]
fn unknown_grid_fields_are_rejected() {
    let text = r#"{ "base": { "s_va": 1e5, "v_ac": 400, "v_dc": 800 },
        "ac_nodes": [{ "id": "A", "kind": "slack" }], "lines": [], "colour": "red" }"#;
    assert!(parse_grid(text).is_err());
}

#[test]
fn state_csv_round_trips() {
    let m = epfl();
    let mut spec = PfSpec::nominal(&m);
    spec.nodes[m.node_index("B03").unwrap()].p = Some(-0.06);
    spec.nodes[m.node_index("B03").unwrap()].q = Some(-0.02);
    let state = solve_pf(&m, &spec, None).unwrap().state;
    let mut buf = Vec::new();
    formats::write_state(&m, &state, &mut buf).unwrap();
    let back = formats::read_state(&m, buf.as_slice()).unwrap();
    for u in 0..m.n_nodes() {
        assert!((back.vm(u) - state.vm(u)).abs() < 1e-15);
        assert!((back.p[u] - state.p[u]).abs() < 1e-15);
    }
    let angle = |s: &acdc_core::GridState, u: usize| s.e_ac[u].arg();
    assert!((angle(&back, 5) - angle(&state, 5)).abs() < 1e-15);
}

#[test]
fn state_csv_must_list_every_node() {
    let m = epfl();
    let text = "node_id,vm,angle,p,q\nB01,1.0,0.0,0.0,0.0\n";
    assert!(formats::read_state(&m, text.as_bytes()).is_err());
}

#[test]
fn spec_file_round_trips() {
    let m = epfl();
    let mut spec = PfSpec::nominal(&m);
    spec.dct_fidelity = Fidelity::Plant;
    spec.nodes[m.node_index("B19").unwrap()].v = Some(1.01);
    let file = SpecFile::from_spec(&m, &spec);
    let json = serde_json::to_string(&file).unwrap();
    let back: SpecFile = serde_json::from_str(&json).unwrap();
    assert_eq!(back.to_spec(&m).unwrap(), spec);
}

#[test]
fn sc_csv_keeps_every_coefficient() {
    let m = epfl().without_dcts();
    let state = solve_pf(&m, &PfSpec::nominal(&m), None).unwrap().state;
    let vars = all_variables(&m);
    let bundle = SensitivityBundle::compute(&m, &state, &vars).unwrap();
    let mut buf = Vec::new();
    formats::write_sc(&m, &bundle, &mut buf).unwrap();
    let (rows, cols, values) = formats::read_sc(buf.as_slice()).unwrap();
    assert_eq!(cols.len(), vars.len());
    assert_eq!(rows.len(), m.n_nodes() + m.n_ac() + m.lines().len() + 2);
    for u in 0..m.n_nodes() {
        for c in 0..vars.len() {
            assert_eq!(values[(u, c)], bundle.voltage.k_e[(u, c)]);
        }
    }
    assert_eq!(rows.last().unwrap(), "Q_loss");
}

#[test]
fn matrix_csv_has_one_row_per_node() {
    let m = epfl();
    let mut buf = Vec::new();
    formats::write_matrix(&m, formats::MatrixKind::Dc, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), m.n_dc() + 1);
    assert!(text.lines().next().unwrap().starts_with("B19"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn profile_csv_round_trips(
        horizon in 1usize..6,
        values in prop::collection::vec(-50.0..50.0f64, 36),
        mpp in prop::collection::vec(0.0..50.0f64, 6),
    ) {
        let m = epfl();
        let base = m.base;
        let mut profile = ResourceProfile::new(horizon);
        let take = |k: usize| (0..horizon).map(|t| base.kw_to_pu(values[(k * 6 + t) % values.len()])).collect::<Vec<_>>();
        for (k, id) in ["household", "evcs", "dc_load", "supercap"].iter().enumerate() {
            profile.insert(id, ProfileSeries { p: take(2 * k), q: take(2 * k + 1), p_mpp: None }).unwrap();
        }
        let pv: Vec<f64> = (0..horizon).map(|t| base.kw_to_pu(mpp[t])).collect();
        profile.insert("pv_roof", ProfileSeries { p: pv.clone(), q: vec![0.0; horizon], p_mpp: Some(pv) }).unwrap();
        let mut buf = Vec::new();
        formats::write_profile(&m, &profile, &mut buf).unwrap();
        let back = formats::read_profile(&m, buf.as_slice()).unwrap();
        prop_assert_eq!(back.horizon(), horizon);
        for id in profile.ids() {
            let (a, b) = (profile.get(id).unwrap(), back.get(id).unwrap());
            for t in 0..horizon {
                prop_assert!((a.p[t] - b.p[t]).abs() < 1e-15);
                prop_assert!((a.q[t] - b.q[t]).abs() < 1e-15);
            }
            prop_assert_eq!(a.p_mpp.is_some(), b.p_mpp.is_some());
        }
    }
}
