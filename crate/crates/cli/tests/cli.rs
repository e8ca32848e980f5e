//! End-to-end checks of the `heatsmooth` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use heatsmooth::attacks::{self, AttackKind};
use heatsmooth::certify::{self, Prediction};
use heatsmooth::smoothing::TrainReport;
use heatsmooth_cli::commands::{AttackRunSummary, CertifySummary};
use heatsmooth_cli::run::{sha256_file, Manifest};
use heatsmooth_cli::ExperimentConfig;

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy2d.toml");

fn config() -> &'static Path {
    Path::new(CONFIG)
}

fn raw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatsmooth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = raw(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the toy baseline into `root/train` and returns the model path.
fn trained(root: &Path, extra: &[&str]) -> PathBuf {
    let out = root.join("train");
    let mut args = vec!["train", "-c", CONFIG, "-o", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out.join("model.json")
}

fn read_curve(path: &Path) -> Vec<(f64, f64)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn train_is_reproducible_and_reduces_loss() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = trained(a.path(), &[]);
    let mb = trained(b.path(), &[]);
    assert_eq!(sha256_file(&ma).unwrap(), sha256_file(&mb).unwrap());

    let text = std::fs::read_to_string(a.path().join("train/train_report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    let losses: Vec<f64> = serde_json::from_value(report["epoch_losses"].clone()).unwrap();
    assert!(losses.last().unwrap() < losses.first().unwrap());

    // every run directory carries the config echo, seed, hashes and version
    let m = Manifest::load(&a.path().join("train")).unwrap();
    assert_eq!(m.seed, 7);
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
    assert_eq!(m.artifacts["model.json"], sha256_file(&ma).unwrap());
    let echo = a.path().join("train/config.toml");
    let again = ExperimentConfig::load(Some(&echo), &[]).unwrap();
    let original = ExperimentConfig::load(Some(config()), &[]).unwrap();
    assert_eq!(again, original);
}

#[test]
fn invalid_config_exits_1_with_the_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = raw(&["train", "-c", CONFIG, "-o", s(tmp.path()), "--set", "train.noise_sigma=-0.1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.noise_sigma"));

    let out = raw(&["smooth", "-o", s(tmp.path()), "--model", "/nonexistent/model.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unsupported_model_version_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let model = trained(tmp.path(), &[]);
    let text = std::fs::read_to_string(&model).unwrap();
    let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
    assert_ne!(bumped, text);
    let bad = tmp.path().join("future.json");
    std::fs::write(&bad, bumped).unwrap();
    let out = raw(&["certify", "-c", CONFIG, "-o", s(&tmp.path().join("c")), "--model", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 99"));
}

#[test]
fn divergence_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let model = trained(tmp.path(), &[]);
    let out = raw(&[
        "smooth",
        "-c",
        CONFIG,
        "-o",
        s(&tmp.path().join("smooth")),
        "--model",
        s(&model),
        "--set",
        "smoothing.lr=1e6",
        "--set",
        "smoothing.distance=raw",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn smoothing_reports_one_entry_per_timestep() {
    let tmp = tempfile::tempdir().unwrap();
    let model = trained(tmp.path(), &[]);
    let heat = tmp.path().join("heat");
    ok(&["smooth", "-c", CONFIG, "-o", s(&heat), "--model", s(&model)]);
    let report: TrainReport =
        serde_json::from_str(&std::fs::read_to_string(heat.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report.timesteps.len(), 5);
    assert!(report.timesteps.iter().all(|t| t.final_loss < t.initial_loss));

    let noisy = tmp.path().join("noisy");
    let args = [
        "smooth",
        "-c",
        CONFIG,
        "-o",
        s(&noisy),
        "--model",
        s(&model),
        "--set",
        "smoothing.variant=imagenet_eq9",
    ];
    ok(&args);
    let report: TrainReport =
        serde_json::from_str(&std::fs::read_to_string(noisy.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report.timesteps.len(), 1);
    let first = sha256_file(&noisy.join("model.json")).unwrap();
    ok(&args);
    assert_eq!(sha256_file(&noisy.join("model.json")).unwrap(), first);
}

#[test]
fn certify_curves_recount_from_records() {
    let tmp = tempfile::tempdir().unwrap();
    let model = trained(tmp.path(), &[]);
    let cfg = ExperimentConfig::load(Some(config()), &[]).unwrap();
    let (_, test) = cfg.datasets().unwrap();
    let labels = test.labels().unwrap();
    // large noise and few samples so that some examples abstain
    let overrides = ["--set", "certify.sigma=1.5", "--set", "certify.n=40", "--set", "certify.n0=10"];
    let mut serial = vec!["certify", "-c", CONFIG, "--model", s(&model)];
    serial.extend_from_slice(&overrides);
    let dir1 = tmp.path().join("c1");
    let dir4 = tmp.path().join("c4");
    let mut a = serial.clone();
    a.extend_from_slice(&["-o", s(&dir1)]);
    ok(&a);
    let mut b = serial.clone();
    b.extend_from_slice(&["-o", s(&dir4), "--workers", "4"]);
    ok(&b);

    let radii = certify::radius_grid(cfg.eval.radius_max, cfg.eval.radius_points);
    let mut abstains = 0;
    for mode in ["stochastic_mc", "deterministic_fixed_class", "lbound"] {
        let records = certify::read_records_csv(&dir1.join(format!("records_{mode}.csv"))).unwrap();
        assert_eq!(records.len(), test.len());
        for r in &records {
            if r.prediction == Prediction::Abstain {
                abstains += 1;
                assert_eq!(r.radius, 0.0);
            }
        }
        let curve = read_curve(&dir1.join(format!("curve_{mode}.csv")));
        assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1), "{mode} curve increases");
        assert_eq!(curve, certify::certified_accuracy_curve(&records, labels, &radii).unwrap());

        // the worker count does not change any output
        for f in [format!("records_{mode}.csv"), format!("curve_{mode}.csv")] {
            assert_eq!(
                sha256_file(&dir1.join(&f)).unwrap(),
                sha256_file(&dir4.join(&f)).unwrap()
            );
        }
    }
    assert!(abstains > 0, "expected some abstentions at sigma 1.5, n 40");
    let summary: CertifySummary =
        serde_json::from_str(&std::fs::read_to_string(dir1.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.modes.len(), 3);
}

#[test]
fn attack_summary_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let model = trained(tmp.path(), &[]);
    let dir = tmp.path().join("attack");
    ok(&["attack", "-c", CONFIG, "-o", s(&dir), "--model", s(&model)]);
    let cfg = ExperimentConfig::load(Some(config()), &[]).unwrap();
    let records = attacks::read_records_csv(&dir.join("records.csv")).unwrap();
    let norms = certify::radius_grid(cfg.attack.epsilon, cfg.eval.norm_points);
    for kind in [AttackKind::Pgd, AttackKind::Ddn] {
        let own: Vec<_> = records.iter().filter(|r| r.attack == kind).cloned().collect();
        let curve = read_curve(&dir.join(format!("curve_{}.csv", kind.as_str())));
        assert!(curve.windows(2).all(|w| w[1].1 >= w[0].1));
        assert_eq!(curve, attacks::attack_curve(&own, &norms).unwrap());
    }
    let summary: AttackRunSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.attacks.len(), 2);
    for a in &summary.attacks {
        let d = a.distances.as_ref().expect("toy attacks succeed");
        assert!(d.median > 0.0 && d.mean > 0.0);
    }

    // unlabeled data is rejected
    let csv = tmp.path().join("unlabeled.csv");
    std::fs::write(&csv, "x_0,x_1\n0.1,0.2\n0.3,0.4\n").unwrap();
    let out = raw(&[
        "attack",
        "-c",
        CONFIG,
        "-o",
        s(&tmp.path().join("a2")),
        "--model",
        s(&model),
        "--set",
        "data.kind=csv",
        "--set",
        &format!("data.train_path={:?}", s(&csv)),
        "--set",
        "data.n_classes=2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no labels"));
}

#[test]
fn oracle_check_default_passes_and_coarse_is_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["oracle-check", "-o", s(&tmp.path().join("fine"))]);
    for name in ["cos(3x)", "exp(-x^2)", "tanh(8x)", "sin(x)cos(2y)"] {
        assert!(text.contains(&format!("== {name}")), "missing table for {name}");
    }
    assert!(text.contains("order ok"));
    assert!(text.contains("overall: PASS"));

    let coarse = ok(&["oracle-check", "--coarse", "-o", s(&tmp.path().join("coarse"))]);
    assert!(coarse.contains("FLAG reduced accuracy"));
    assert!(coarse.contains("overall: FAIL"));
}

#[test]
fn bench_reports_modes_and_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let model = trained(tmp.path(), &[]);
    let dir = tmp.path().join("bench");
    ok(&["bench", "-c", CONFIG, "-o", s(&dir), "--model", s(&model)]);
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("bench.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        for key in ["mode", "n_samples", "mean_seconds", "ratio"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
    }
    let one = rows
        .iter()
        .find(|r| r["mode"] == "ensemble" && r["n_samples"] == 1)
        .unwrap();
    let ratio = one["ratio"].as_f64().unwrap();
    assert!((0.5..=2.0).contains(&ratio), "n=1 ensemble ratio {ratio}");
}

#[test]
fn report_rejects_non_evaluation_runs() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path(), &[]);
    let out = raw(&["report", "-o", s(&tmp.path().join("r")), "--runs", s(&tmp.path().join("train"))]);
    assert_eq!(out.status.code(), Some(1));
}
