use acdc_core::devices::DctDef;
use acdc_core::grid::{Base, GridDef, IcDef, IcLoss, LineDef, Node};
use acdc_core::power_flow::{solve_pf_with, PfOptions};
use acdc_core::qp::{self, QpProblem};
use acdc_core::sensitivity::all_variables;
use acdc_core::{DctModel, Fidelity, GridModel, GridState, IcMode, NodeKind, PfSpec, SensitivityBundle};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn node(id: &str, kind: NodeKind) -> Node {
    Node {
        id: id.into(),
        kind,
        v_min: 0.9,
        v_max: 1.1,
        v_set: 1.0,
    }
}

fn line(id: &str, from: &str, to: &str, r: f64, x: Option<f64>) -> LineDef {
    LineDef {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        r_ohm: r,
        x_ohm: x,
        ampacity_a: 200.0,
    }
}

const LOSS: IcLoss = IcLoss {
    a0: 0.002,
    a1: 0.005,
    a2: 0.02,
    filter_g: 0.001,
};

/// AC feeder with two converters into a meshed DC grid.
fn hybrid(r: [f64; 6]) -> GridModel {
    let def = GridDef {
        name: "prop".into(),
        base: Base {
            s_va: 100e3,
            v_ac: 400.0,
            v_dc: 800.0,
        },
        ac_nodes: vec![
            node("S", NodeKind::AcSlack),
            node("A", NodeKind::AcPq),
            node("B", NodeKind::AcPq),
            node("C1", NodeKind::IcAc(IcMode::EdcQac)),
            node("C2", NodeKind::IcAc(IcMode::PacQac)),
        ],
        dc_nodes: vec![
            node("D1", NodeKind::IcDc(IcMode::EdcQac)),
            node("D2", NodeKind::IcDc(IcMode::PacQac)),
            node("P", NodeKind::DcP),
        ],
        ic_pairs: vec![
            IcDef {
                id: "IC1".into(),
                ac: "C1".into(),
                dc: "D1".into(),
                rating_kva: 45.0,
                loss: LOSS,
            },
            IcDef {
                id: "IC2".into(),
                ac: "C2".into(),
                dc: "D2".into(),
                rating_kva: 45.0,
                loss: LOSS,
            },
        ],
        lines: vec![
            line("SA", "S", "A", r[0], Some(0.4 * r[0])),
            line("AB", "A", "B", r[1], Some(0.4 * r[1])),
            line("AC1", "A", "C1", r[2], Some(0.3 * r[2])),
            line("BC2", "B", "C2", r[3], Some(0.3 * r[3])),
            line("D1P", "D1", "P", r[4], None),
            line("PD2", "P", "D2", r[5], None),
            line("D1D2", "D1", "D2", r[5] + r[4], None),
        ],
        devices: vec![],
        dcts: vec![],
    };
    GridModel::from_def(&def).unwrap()
}

fn loaded_spec(m: &GridModel, p: [f64; 4], q: [f64; 3], e1: f64) -> PfSpec {
    let mut spec = PfSpec::nominal(m);
    let at = |id: &str| m.node_index(id).unwrap();
    spec.nodes[at("A")].p = Some(p[0]);
    spec.nodes[at("A")].q = Some(q[0]);
    spec.nodes[at("B")].p = Some(p[1]);
    spec.nodes[at("B")].q = Some(q[1]);
    spec.nodes[at("C2")].p = Some(p[2]);
    spec.nodes[at("C2")].q = Some(q[2]);
    spec.nodes[at("P")].p = Some(p[3]);
    spec.nodes[at("D1")].v = Some(e1);
    spec
}

fn tight() -> PfOptions {
    PfOptions {
        tolerance: 1e-12,
        max_iterations: 30,
    }
}

/// Converter loss written out from its definition.
fn converter_loss(l: &IcLoss, p: f64, q: f64, vm: f64) -> f64 {
    let i = (p * p + q * q).sqrt() / vm;
    l.a0 + l.a1 * i + l.a2 * i * i + l.filter_g * vm * vm
}

fn resistances() -> impl Strategy<Value = [f64; 6]> {
    [0.01..0.08f64, 0.01..0.08f64, 0.005..0.03f64, 0.005..0.03f64, 0.02..0.1f64, 0.02..0.1f64]
}

fn operating_point() -> impl Strategy<Value = ([f64; 4], [f64; 3], f64)> {
    (
        [-0.2..0.15f64, -0.2..0.15f64, -0.15..0.15f64, -0.15..0.1f64],
        [-0.08..0.08f64, -0.08..0.08f64, -0.1..0.1f64],
        0.98..1.02f64,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pf_meets_spec_and_conserves_power(r in resistances(), (p, q, e1) in operating_point()) {
        let m = hybrid(r);
        let spec = loaded_spec(&m, p, q, e1);
        let sol = solve_pf_with(&m, &spec, None, &tight()).unwrap();
        let s = &sol.state;
        for (u, sp) in spec.nodes.iter().enumerate() {
            if let Some(v) = sp.p { prop_assert!((s.p[u] - v).abs() < 1e-10, "P at {}", m.node(u).id); }
            if let Some(v) = sp.q { prop_assert!((s.q[u] - v).abs() < 1e-10, "Q at {}", m.node(u).id); }
            if let Some(v) = sp.v { prop_assert!((s.vm(u) - v).abs() < 1e-10, "V at {}", m.node(u).id); }
        }
        // Every converter passes its power through minus its own loss.
        for ic in m.ic_pairs() {
            let loss = converter_loss(&ic.loss, s.p[ic.ac], s.q[ic.ac], s.vm(ic.ac));
            prop_assert!((s.p[ic.ac] + s.p[ic.dc] + loss).abs() < 1e-10);
        }
        // Injections recomputed from the voltages agree with the solver's.
        let again = GridState::from_voltages(&m, s.e_ac.clone(), s.e_dc.clone(), 0);
        for u in 0..m.n_nodes() {
            prop_assert!((again.p[u] - s.p[u]).abs() < 1e-12);
        }
        // The network dissipates, it never generates.
        prop_assert!(s.network_p_losses() > -1e-12);
    }

    #[test]
    fn voltage_sc_predicts_small_moves(r in resistances(), (p, q, e1) in operating_point(), pick in 0usize..64, h in prop_oneof![Just(-1e-4), Just(1e-4)]) {
        let m = hybrid(r);
        let spec = loaded_spec(&m, p, q, e1);
        let base = solve_pf_with(&m, &spec, None, &tight()).unwrap().state;
        let vars = all_variables(&m);
        let bundle = SensitivityBundle::compute(&m, &base, &vars).unwrap();
        let k = pick % vars.len();
        let var = vars[k];
        let mut moved = PfSpec::from_state(&m, &base, Fidelity::Ideal);
        let slot = &mut moved.nodes[var.node];
        match var.kind {
            acdc_core::VarKind::P => slot.p = Some(slot.p.unwrap() + h),
            acdc_core::VarKind::Q => slot.q = Some(slot.q.unwrap() + h),
            acdc_core::VarKind::V => slot.v = Some(slot.v.unwrap() + h),
        }
        let after = solve_pf_with(&m, &moved, Some(&base), &tight()).unwrap().state;
        let mut delta = vec![0.0; vars.len()];
        delta[k] = h;
        let pred = bundle.predict(&delta).unwrap();
        for u in 0..m.n_nodes() {
            // second-order remainder of a 1e-4 step
            prop_assert!((pred.vm[u] - after.vm(u)).abs() < 2e-7, "{} at {}", var.label(&m), m.node(u).id);
        }
    }

    #[test]
    fn dct_conserves_energy(
        alpha in 0.2..2.0f64,
        r in 0.05..1.0f64,
        p_mag in 0.0..1.0f64,
        deadband in 0.0..2.0f64,
        e1 in 0.97..1.03f64,
        e2 in 0.97..1.03f64,
        plant in any::<bool>(),
    ) {
        let base = Base { s_va: 100e3, v_ac: 400.0, v_dc: 800.0 };
        let def = DctDef {
            id: "T".into(),
            primary: "a".into(),
            secondary: "b".into(),
            alpha_kw_per_v: alpha,
            r_equiv_ohm: r,
            p_mag_loss_kw: p_mag,
            deadband_halfwidth_v: deadband,
            rating_kw: 30.0,
        };
        let d = DctModel::new(def, 0, 1, &base);
        let fid = if plant { Fidelity::Plant } else { Fidelity::Ideal };
        let w = d.power(e1, e2, fid);
        prop_assert!((w.p1 + w.p2 + w.loss).abs() < 1e-15);
        prop_assert!(w.loss >= d.p_mag);
        prop_assert!(w.transfer * (e1 - e2) >= 0.0);
        prop_assert!(w.transfer.abs() <= d.alpha * (e1 - e2).abs() + 1e-15);
        if (e1 - e2).abs() >= d.deadband {
            prop_assert!((w.transfer - d.alpha * (e1 - e2)).abs() < 1e-14);
        }
        // Jacobian against central differences.
        let j = d.jacobian(e1, e2, fid);
        let h = 1e-7;
        let fd1 = (d.power(e1 + h, e2, fid).p1 - d.power(e1 - h, e2, fid).p1) / (2.0 * h);
        let fd2 = (d.power(e1, e2 + h, fid).p2 - d.power(e1, e2 - h, fid).p2) / (2.0 * h);
        prop_assert!((j.dp1[0] - fd1).abs() < 1e-5 * (1.0 + fd1.abs()));
        prop_assert!((j.dp2[1] - fd2).abs() < 1e-5 * (1.0 + fd2.abs()));
    }

    #[test]
    fn qp_solution_satisfies_kkt(
        n in 2usize..6,
        seed_h in prop::collection::vec(-1.0..1.0f64, 36),
        seed_c in prop::collection::vec(-2.0..2.0f64, 6),
        rows in prop::collection::vec((prop::collection::vec(-1.0..1.0f64, 6), 0.0..1.0f64), 0..10),
        eq in prop::collection::vec(-1.0..1.0f64, 6),
        with_eq in any::<bool>(),
    ) {
        let m = DMatrix::from_fn(n, n, |i, j| seed_h[i * 6 + j]);
        let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
        let c = DVector::from_fn(n, |i, _| seed_c[i]);
        let mut prob = QpProblem::new(h, c);
        // Every row admits x = 0, so the problem is feasible.
        prob.a_in = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
        prob.b_in = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        if with_eq {
            prob.a_eq = DMatrix::from_fn(1, n, |_, j| eq[j]);
            prob.b_eq = DVector::zeros(1);
        }
        let s = qp::solve(&prob).unwrap();
        prop_assert!(s.kkt.stationarity < 1e-8, "{:?}", s.kkt);
        prop_assert!(s.kkt.primal < 1e-9, "{:?}", s.kkt);
        prop_assert!(s.kkt.complementarity < 1e-9, "{:?}", s.kkt);
        prop_assert!(s.kkt.dual > -1e-12, "{:?}", s.kkt);
        prop_assert!(prob.objective(&s.x) <= prob.objective(&DVector::zeros(n)) + 1e-12);
        let report = qp::kkt_report(&prob, &s.x, &s.lambda, &s.mu);
        prop_assert!(report.stationarity < 1e-8);
    }

    #[test]
    fn admittance_is_symmetric_with_zero_row_sums(r in resistances()) {
        let m = hybrid(r);
        let y = m.unified_admittance();
        for i in 0..y.nrows() {
            let sum: num_complex::Complex64 = y.row(i).iter().sum();
            prop_assert!(sum.norm() < 1e-9 * y[(i, i)].norm());
            for j in 0..y.ncols() {
                prop_assert!((y[(i, j)] - y[(j, i)]).norm() < 1e-12);
            }
        }
    }
}
