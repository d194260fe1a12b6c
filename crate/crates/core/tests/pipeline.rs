use gmethods_core::ipw::{compute_weights, risk_set, IeModel};
use gmethods_core::report::{emit, fit_all, read_summary_csv};
use gmethods_core::trial::{
    per_protocol_filter, read_dataset_csv, realized_doses, write_dataset_csv, Regime, Simulator, ARMS,
};
use gmethods_core::{run_scenario, AnalysisOptions, Error, MethodId, Scenario, Variant};

fn small(variant: Variant) -> Scenario {
    Scenario::new(variant).with_n(120).with_seed(3)
}

#[test]
fn observed_and_ground_truth_share_subjects() {
    let sim = Simulator::new(&small(Variant::Main)).unwrap();
    let obs = sim.simulate(Regime::Observed).unwrap();
    let gt = sim.simulate(Regime::GroundTruth).unwrap();
    assert_eq!(obs.subjects.len(), 5 * 120);
    for (o, g) in obs.subjects.iter().zip(&gt.subjects) {
        assert_eq!((o.subject_id, o.arm), (g.subject_id, g.arm));
        assert_eq!((o.eta_cl, o.eta_v), (g.eta_cl, g.eta_v));
        // identical history up to the first assessment
        assert_eq!(o.troughs[0], g.troughs[0]);
        assert!(g.adherent && g.ie == [false; 3]);
        let ladder = ARMS[g.arm as usize - 1].ladder;
        assert_eq!(g.doses, ladder);
        assert_eq!(o.doses, realized_doses(&ladder, &o.ie));
        assert_eq!(o.adherent, !o.ie.contains(&true));
        if o.adherent {
            assert_eq!(o.troughs, g.troughs);
        }
    }
}

#[test]
fn dataset_csv_round_trip() {
    let scn = small(Variant::Main);
    let obs = Simulator::new(&scn).unwrap().simulate(Regime::Observed).unwrap();
    let mut buf = Vec::new();
    write_dataset_csv(&obs, &mut buf).unwrap();
    let back = read_dataset_csv(buf.as_slice(), scn, Regime::Observed).unwrap();
    assert_eq!(back.subjects.len(), obs.subjects.len());
    for (a, b) in back.subjects.iter().zip(&obs.subjects) {
        assert_eq!((a.subject_id, a.arm, a.ie, a.adherent), (b.subject_id, b.arm, b.ie, b.adherent));
        assert_eq!(a.doses, b.doses);
        for k in 0..4 {
            assert!((a.troughs[k] - b.troughs[k]).abs() <= 1e-12 * b.troughs[k]);
        }
    }
}

#[test]
fn per_protocol_keeps_only_adherent() {
    let obs = Simulator::new(&small(Variant::Main)).unwrap().simulate(Regime::Observed).unwrap();
    let pp = per_protocol_filter(&obs);
    assert!(pp.subjects.iter().all(|s| s.adherent));
    assert_eq!(pp.subjects.len(), obs.subjects.iter().filter(|s| s.adherent).count());
    assert!(pp.subjects.len() < obs.subjects.len());
}

#[test]
fn flat_ie_model_gives_power_of_two_weights() {
    let mut scn = small(Variant::Main);
    scn.beta = 0.0;
    let obs = Simulator::new(&scn).unwrap().simulate(Regime::Observed).unwrap();
    let model = IeModel::from_scenario(&scn).unwrap();
    let w = compute_weights(&obs, &model, None).unwrap();
    for (i, id) in w.subject_ids.iter().enumerate() {
        let s = obs.subjects.iter().find(|s| s.subject_id == *id).unwrap();
        let at_risk = risk_set(scn.ie_scope, s).unwrap().iter().filter(|&&r| r).count();
        assert_eq!(w.weights[i], 2f64.powi(at_risk as i32));
    }
}

#[test]
fn estimators_refuse_ground_truth() {
    let gt = Simulator::new(&small(Variant::Main)).unwrap().simulate(Regime::GroundTruth).unwrap();
    assert!(matches!(fit_all(&gt, &AnalysisOptions::default()), Err(Error::Regime(_))));
}

#[test]
fn full_run_writes_readable_summaries() {
    let opts = AnalysisOptions { draws: 400, ..Default::default() };
    let run = run_scenario(&small(Variant::Main), &opts).unwrap();
    assert_eq!(run.rows.len(), 30);
    for r in &run.rows {
        assert!(!r.status.is_failure(), "{r:?}");
        if r.method == MethodId::GroundTruth {
            assert_eq!((r.rel_mean, r.rel_sd), (1.0, 1.0));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    emit(&run.rows, dir.path()).unwrap();
    let csv = std::fs::File::open(dir.path().join("summary.csv")).unwrap();
    assert_eq!(read_summary_csv(csv).unwrap().len(), 30);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().map(Vec::len), Some(30));
}

#[test]
fn cmax_needs_a_fitted_ie_model_for_weights() {
    let scn = small(Variant::Cmax);
    let opts = AnalysisOptions {
        draws: 200,
        ie_source: Some(gmethods_core::ipw::IeSource::TrueModel),
        ..Default::default()
    };
    let run = run_scenario(&scn, &opts).unwrap();
    let ipw: Vec<_> = run.rows.iter().filter(|r| r.method == MethodId::Ipw).collect();
    assert_eq!(ipw.len(), 5);
    assert!(ipw.iter().all(|r| r.status.is_failure()));
    let default = run_scenario(&scn, &AnalysisOptions { draws: 200, ..Default::default() }).unwrap();
    assert!(default.rows.iter().filter(|r| r.method == MethodId::Ipw).all(|r| !r.status.is_failure()));
}
