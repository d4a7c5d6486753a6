use mixlap::driver::{
    derivative_limit, emit_outputs, resample, run, run_scaling_test, smooth_bump, Cell, ExperimentConfig,
    ExperimentKind, ExperimentReport, Format, Provenance, Status, Table, Verdict,
};
use mixlap::lattice::{build_grid, Field, Geometry, ModelParams};
use mixlap::operators::assemble_kernel;
use proptest::prelude::*;

fn params2() -> ModelParams {
    ModelParams::new(2, 1.5, 1.2, 0.5, 0.5, 1.0, None).unwrap()
}

fn verdict(status: Status) -> Verdict {
    Verdict { name: "v".into(), status, detail: String::new() }
}

#[test]
fn exit_codes_follow_the_worst_verdict() {
    let cfg = ExperimentConfig::new(ExperimentKind::Thresholds, params2(), Geometry::unit_box(2), 8);
    let mut r = ExperimentReport::new(&cfg);
    assert_eq!(r.exit_code(), 0);
    assert!(r.passed());
    r.verdicts.push(verdict(Status::Pass));
    assert_eq!(r.exit_code(), 0);
    r.verdicts.push(verdict(Status::Inconclusive));
    assert_eq!(r.exit_code(), 3);
    r.verdicts.push(verdict(Status::Fail));
    assert_eq!(r.exit_code(), 2);
    assert!(!r.passed());
}

#[test]
fn validation_rejects_incomplete_configs() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::Branch, params2(), Geometry::unit_box(2), 8);
    assert!(cfg.validate().is_err());
    cfg.lambdas = Some(vec![2.0, 1.0]);
    assert!(cfg.validate().is_err());
    cfg.lambdas = Some(vec![1.0, 2.0]);
    assert!(cfg.validate().is_ok());

    let mut cfg = ExperimentConfig::new(ExperimentKind::Nonexistence, params2(), Geometry::unit_box(2), 8);
    cfg.lambdas = Some(vec![0.0, 0.5]);
    cfg.init_count = Some(3);
    assert!(cfg.validate().is_err());
    cfg.lambdas = Some(vec![0.0]);
    assert!(cfg.validate().is_ok());
    cfg.init_count = Some(0);
    assert!(cfg.validate().is_err());

    let cfg = ExperimentConfig::new(ExperimentKind::Thresholds, params2(), Geometry::unit_box(3), 8);
    assert!(cfg.validate().is_err());

    let mut cfg = ExperimentConfig::new(ExperimentKind::Scaling, params2(), Geometry::unit_box(2), 8);
    cfg.tau_step = Some(0.5);
    assert!(cfg.validate().is_err());

    assert!(ExperimentConfig::from_json("{\"experiment\": \"nope\"}").is_err());
}

#[test]
fn shipped_configs_parse() {
    let dir = format!("{}/configs", env!("CARGO_MANIFEST_DIR"));
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::from_json(&std::fs::read_to_string(&path).unwrap());
        assert!(cfg.is_ok(), "{path:?}: {cfg:?}");
        count += 1;
    }
    assert_eq!(count, 8);
}

#[test]
fn provenance_tracks_the_config() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::Thresholds, params2(), Geometry::unit_box(2), 8);
    let a = Provenance::of(&cfg);
    assert_eq!(a, Provenance::of(&cfg));
    assert_eq!(a.config_hash.len(), 64);
    cfg.seed = 1;
    assert_ne!(a.config_hash, Provenance::of(&cfg).config_hash);
}

#[test]
fn outputs_are_written_and_read_back() {
    let cfg = ExperimentConfig::new(ExperimentKind::Thresholds, params2(), Geometry::unit_box(2), 8);
    let mut r = ExperimentReport::new(&cfg);
    let mut t = Table::new("grid", &["k", "value", "ok", "label"]);
    t.push(vec![1usize.into(), 0.1.into(), true.into(), "a".into()]);
    t.push(vec![2usize.into(), (-1e-300).into(), false.into(), "b c".into()]);
    r.tables.push(t.clone());
    let dir = std::env::temp_dir().join(format!("mixlap-driver-{}", std::process::id()));
    let prefix = dir.join("run");
    let csvs = emit_outputs(&r, &prefix, Format::Csv).unwrap();
    assert_eq!(csvs, vec![dir.join("run_grid.csv")]);
    let back = Table::from_csv("grid", &std::fs::read_to_string(&csvs[0]).unwrap()).unwrap();
    assert_eq!(back, t);
    let json = emit_outputs(&r, &prefix, Format::Json).unwrap();
    let parsed: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(&json[0]).unwrap()).unwrap();
    assert_eq!(parsed, r);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn small_beta_run_passes_its_ordering_checks() {
    let model = ModelParams::new(1, 2.0, 1.5, 0.5, 0.5, 1.0, Some(4.0)).unwrap();
    let mut cfg = ExperimentConfig::new(ExperimentKind::BetaSeq, model, Geometry::unit_box(1), 33);
    cfg.k_max = Some(8);
    let r = run(&cfg).unwrap();
    for name in ["beta_positive_nonincreasing", "rho_decreasing"] {
        assert_eq!(r.verdict(name).unwrap().status, Status::Pass, "{name}");
    }
    let beta = r.table("beta").unwrap().column("beta").unwrap();
    assert_eq!(beta.len(), 8);
    assert_eq!(r.to_json().unwrap(), run(&cfg).unwrap().to_json().unwrap());
}

#[test]
fn scaling_ratios_on_a_smooth_bump() {
    let prm = ModelParams::new(2, 2.0, 1.5, 0.5, 0.5, 0.0, Some(4.0)).unwrap();
    let g = build_grid(&Geometry::unit_box(2), 65).unwrap();
    let k = assemble_kernel(&g, &prm).unwrap();
    let chk = run_scaling_test(&smooth_bump(&g), &g, &prm, &k, 0.05).unwrap();
    assert!(chk.grad_error() < 0.02, "{chk:?}");
    assert!(chk.gagliardo_error() < 0.02, "{chk:?}");
    assert!(chk.bound_holds(0.05), "{chk:?}");
}

fn text_cell() -> impl Strategy<Value = String> {
    "[a-z_ ]{1,10}".prop_filter("must stay text", |s| {
        s.trim() == s && s.parse::<f64>().is_err() && s.parse::<bool>().is_err()
    })
}

fn cell() -> impl Strategy<Value = Cell> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(Cell::Num),
        any::<bool>().prop_map(Cell::Flag),
        text_cell().prop_map(Cell::Text),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(rows in prop::collection::vec(prop::collection::vec(cell(), 3), 0..12)) {
        let mut t = Table::new("t", &["a", "b", "c"]);
        for r in rows {
            t.push(r);
        }
        let back = Table::from_csv("t", &t.to_csv().unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn resampling_at_unit_scale_is_the_identity(vals in prop::collection::vec(-2.0f64..2.0, 64)) {
        let g = build_grid(&Geometry::unit_box(2), 8).unwrap();
        let u = Field::from_values(&g, vals).unwrap();
        let v = resample(&u, &g, 1.0).unwrap();
        for (a, b) in u.values.iter().zip(&v.values) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn derivative_limit_tends_to_p_minus_ps(p in 1.1f64..4.0, s in 0.05f64..0.95) {
        let got = derivative_limit(p, s, 1e-7);
        prop_assert!((got - (p - p * s)).abs() < 1e-4);
    }
}
