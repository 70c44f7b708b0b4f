//! End-to-end tests of configuration parsing, dispatch, persistence, the binary
//! and regression comparison.

use proptest::prelude::*;
use std::path::Path;
use std::process::Command;
use vpb_cli::{
    compare, parse_config, run, ExperimentConfig, ExperimentKind, RunRecord, Tolerances,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vpb-lab"))
}

fn with_out(text: &str, dir: &Path) -> ExperimentConfig {
    let mut c = parse_config(text).unwrap();
    c.out_dir = dir.to_path_buf();
    c
}

fn cheap_decay(order: usize) -> String {
    format!(
        "kind = \"decay\"\n[decay]\nt_end = 200.0\nsamples = 60\nwindow = [20.0, 200.0]\n\
         k_set = {{ domain = \"radial\", k_max = 8.0, nodes = 32 }}\n\
         backend = {{ dim = 3, order = {order}, kind = \"bgk_surrogate\" }}\n"
    )
}

#[test]
fn decay_config_echoes_quarter_target() {
    let c = parse_config("kind = \"decay\"\n[decay]\nq = 1\nbackend = { dim = 3, order = 4, kind = \"bgk_surrogate\" }\n").unwrap();
    // σ_{q,m} = (n/2)(1/q − 1/2) + m/2 at n = 3, q = 1, m = −1 (generic data, α = α').
    assert!((c.sigma_target().unwrap() - (0.75 - 0.5)).abs() < 1e-15);
    let mut reduced = c.clone();
    reduced.decay.data.subtract_p0 = true;
    assert!((reduced.sigma_target().unwrap() - 0.75).abs() < 1e-15);
}

#[test]
fn malformed_numeric_names_the_field() {
    let err = parse_config("[torus]\nt_end = \"forty\"\n")
        .unwrap_err()
        .to_string();
    assert!(err.contains("t_end"), "{err}");
    let err = parse_config("seed = -3\n").unwrap_err().to_string();
    assert!(err.contains("seed"), "{err}");
}

#[test]
fn default_config_round_trips() {
    let c = ExperimentConfig::default();
    assert_eq!(parse_config(&c.to_toml().unwrap()).unwrap(), c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn configs_round_trip(
        kind in 0usize..7,
        seed in 0u64..=i64::MAX as u64,
        t_end in 1e-3f64..1e4,
        eps in -0.4f64..0.4,
        k in prop::collection::vec(1e-3f64..50.0, 1..6),
        refine in any::<bool>(),
        nx in 1usize..20,
    ) {
        let mut c = ExperimentConfig::default();
        c.kind = ExperimentKind::ALL[kind];
        c.seed = seed;
        c.refine = refine;
        c.torus.t_end = t_end;
        c.decay.data.subtract_p0 = refine;
        c.stationary.background.epsilon = eps;
        c.modes.k_values = k.clone();
        c.validate.k_values = k;
        c.nonlinear.nx = 2 * nx + 1;
        c.duhamel.horizon = t_end;
        prop_assert_eq!(parse_config(&c.to_toml().unwrap()).unwrap(), c);
    }
}

#[test]
fn validate_runs_the_invariant_suite() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&with_out("kind = \"validate\"", dir.path())).unwrap();
    assert!(rec.summary.passed, "{:?}", rec.summary.checks);
    assert!(rec.summary.checks.len() >= 9);
    for p in &rec.outputs {
        assert!(p.exists(), "{}", p.display());
    }
    let csv = std::fs::read_to_string(dir.path().join("validate_moments.csv")).unwrap();
    assert!(csv.starts_with("moment,computed,expected,error\n"));
    assert_eq!(csv.lines().count(), 10);
}

#[test]
fn binary_exit_code_reflects_checks() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bin()
        .args(["--kind", "validate", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );

    // A zero tolerance cannot be met by floating-point quadrature.
    let cfg = dir.path().join("strict.toml");
    std::fs::write(&cfg, "kind = \"validate\"\n[validate]\ntolerance = 0.0\n").unwrap();
    let bad = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .arg("--seed")
        .arg("9")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("FAIL") && err.contains("--seed 9"), "{err}");
}

#[test]
fn binary_rejects_unknown_kind_and_lists_kinds() {
    let out = bin().args(["--kind", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("--list-kinds").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for k in ExperimentKind::ALL {
        assert!(text.contains(k.name()));
    }
}

#[test]
fn binary_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    std::fs::write(&cfg, "kind = \"torus\"\n[torus]\nkmax = 4\n").unwrap();
    let out = bin().arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kmax"));
}

#[test]
fn torus_summary_contains_fitted_rate() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&with_out("kind = \"torus\"", dir.path())).unwrap();
    assert!(rec.summary.passed);
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("torus_summary.json")).unwrap(),
    )
    .unwrap();
    let rate = json["metrics"]["rate"].as_f64().unwrap();
    assert!(rate > 0.0);
    assert!(rate >= json["metrics"]["target"].as_f64().unwrap());
    let series = std::fs::read_to_string(dir.path().join("torus_series.csv")).unwrap();
    assert!(series.starts_with("t,norm\n"));
}

#[test]
fn identical_config_and_seed_reproduce_summaries() {
    for kind in ["modes", "nonlinear", "stationary"] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let text = format!("kind = \"{kind}\"\nseed = 11\n");
        let ra = run(&with_out(&text, a.path())).unwrap();
        let rb = run(&with_out(&text, b.path())).unwrap();
        assert_eq!(ra.summary, rb.summary);
        let file = format!("{kind}_summary.json");
        assert_eq!(
            std::fs::read(a.path().join(&file)).unwrap(),
            std::fs::read(b.path().join(&file)).unwrap()
        );
        let d = compare(&ra, &rb, &Tolerances::default()).unwrap();
        assert!(d.entries.is_empty() && d.passed);
    }
}

#[test]
fn record_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&with_out("kind = \"stationary\"", dir.path())).unwrap();
    let loaded = RunRecord::load(&dir.path().join("stationary_record.json")).unwrap();
    assert_eq!(loaded, rec);
}

#[test]
fn halved_grid_order_is_compared_against_refinement_tolerance() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let base = run(&with_out(&cheap_decay(8), a.path())).unwrap();
    let halved = run(&with_out(&cheap_decay(4), b.path())).unwrap();
    let ea = base.summary.metrics["exponent"];
    let eb = halved.summary.metrics["exponent"];
    let delta = (ea - eb).abs();
    assert!(delta > 0.0);

    let lax = compare(
        &base,
        &halved,
        &Tolerances::uniform(f64::INFINITY).with("exponent", 0.02),
    )
    .unwrap();
    let entry = lax.entries.iter().find(|e| e.field == "exponent").unwrap();
    assert_eq!(entry.delta, Some(delta));
    assert_eq!(entry.within, delta <= 0.02);

    let strict = compare(
        &base,
        &halved,
        &Tolerances::uniform(f64::INFINITY).with("exponent", delta / 2.0),
    )
    .unwrap();
    assert!(!strict.passed);
    assert_eq!(
        strict
            .flagged()
            .map(|e| e.field.as_str())
            .collect::<Vec<_>>(),
        vec!["exponent"]
    );
}

#[test]
fn baseline_flag_fails_on_regression() {
    let dir = tempfile::tempdir().unwrap();
    let first = bin()
        .args(["--kind", "stationary", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(first.status.success());
    let record = dir.path().join("stationary_record.json");
    let base = dir.path().join("baseline.json");
    std::fs::copy(&record, &base).unwrap();
    let same = bin()
        .args(["--kind", "stationary", "--out"])
        .arg(dir.path())
        .arg("--baseline")
        .arg(&base)
        .output()
        .unwrap();
    assert!(
        same.status.success(),
        "{}",
        String::from_utf8_lossy(&same.stderr)
    );

    let mut tampered = RunRecord::load(&base).unwrap();
    *tampered.summary.metrics.get_mut("phi_sup").unwrap() *= 2.0;
    std::fs::write(&base, serde_json::to_string(&tampered).unwrap()).unwrap();
    let drift = bin()
        .args(["--kind", "stationary", "--out"])
        .arg(dir.path())
        .arg("--baseline")
        .arg(&base)
        .args(["--field-tolerance", "phi_sup=1e-12"])
        .output()
        .unwrap();
    assert_eq!(drift.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&drift.stderr).contains("REGRESSION phi_sup"));
}
