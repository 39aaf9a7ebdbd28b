use std::path::Path;

use assert_cmd::Command;
use hetcal::experiment::BenchmarkReport;

fn hetcal() -> Command {
    Command::cargo_bin("hetcal").unwrap()
}

const QUICK: [&str; 8] = [
    "--epochs",
    "4",
    "--hidden-widths",
    "8,8",
    "--mc-iterations",
    "4",
    "--predict-mc-iterations",
    "8",
];

fn report(dir: &Path) -> BenchmarkReport {
    BenchmarkReport::load(&dir.join("report.json")).unwrap()
}

#[test]
fn train_writes_report_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    hetcal()
        .args([
            "train",
            "--dataset",
            "synthetic:uniform_band",
            "--estimator",
            "quantile_hc",
        ])
        .args(QUICK)
        .args(["--repeats", "2", "--out-dir"])
        .arg(dir.path())
        .assert()
        .success();
    let r = report(dir.path());
    assert_eq!(r.runs.len(), 2);
    for run in &r.runs {
        assert!(run.rmse.unwrap().is_finite());
        assert!(run.ce.unwrap().is_finite());
    }
    let run_dir = dir.path().join("uniform_band_quantile_hc_p0.2_r0");
    for f in [
        "curve.csv",
        "sigma_histogram.csv",
        "predictions.json",
        "model.json",
        "train_log.jsonl",
    ] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(run_dir.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 6);
}

#[test]
fn saved_config_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    hetcal()
        .args([
            "train",
            "--dataset",
            "synthetic:sine_abs_noise",
            "--estimator",
            "dropout_hc",
        ])
        .args(QUICK)
        .args(["--repeats", "2", "--seed", "11", "--out-dir"])
        .arg(a.path())
        .assert()
        .success();
    hetcal()
        .args(["train", "--config"])
        .arg(a.path().join("config.json"))
        .arg("--out-dir")
        .arg(b.path())
        .assert()
        .success();
    let (ra, rb) = (report(a.path()), report(b.path()));
    assert_eq!(ra.runs.len(), 2);
    assert_eq!(ra.without_timings().runs, rb.without_timings().runs);
    assert_eq!(
        ra.without_timings().aggregates,
        rb.without_timings().aggregates
    );
}

#[test]
fn dump_config_round_trips_through_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    hetcal()
        .args(["train", "--dataset", "boston", "--estimator", "mc_dropout"])
        .args(["--dropout-rate", "0.3", "--seed", "5", "--dump-config"])
        .arg(&path)
        .assert()
        .success();
    let cfg = hetcal::experiment::ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.train.dropout_rate, 0.3);
    assert_eq!(cfg.seed, 5);
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn bench_grid_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    hetcal()
        .args([
            "bench",
            "--datasets",
            "synthetic:linear_gauss,synthetic:uniform_band",
        ])
        .args(QUICK)
        .args(["--repeats", "2", "--threads", "2", "--out-dir"])
        .arg(dir.path())
        .assert()
        .success();
    let r = report(dir.path());
    assert_eq!(r.runs.len(), 16);
    assert_eq!(r.aggregates.len(), 8);
    for ds in ["linear_gauss", "uniform_band"] {
        let best: Vec<_> = r
            .aggregates
            .iter()
            .filter(|a| a.dataset == ds && a.best)
            .collect();
        assert_eq!(best.len(), 1);
    }
}

#[test]
fn sweep_writes_rate_table() {
    let dir = tempfile::tempdir().unwrap();
    hetcal()
        .args([
            "sweep-p",
            "--dataset",
            "synthetic:sine_abs_noise",
            "--rates",
            "0.1,0.2,0.3,0.5",
        ])
        .args(QUICK)
        .args(["--repeats", "1", "--out-dir"])
        .arg(dir.path())
        .assert()
        .success();
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    let runs = std::fs::read_to_string(dir.path().join("sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 8);
}

#[test]
fn curve_verb_reads_saved_predictions() {
    let dir = tempfile::tempdir().unwrap();
    hetcal()
        .args([
            "train",
            "--dataset",
            "synthetic:linear_gauss",
            "--estimator",
            "hnn",
        ])
        .args(QUICK)
        .args(["--repeats", "1", "--out-dir"])
        .arg(dir.path())
        .assert()
        .success();
    let preds = dir.path().join("linear_gauss_hnn_p0.2_r0/predictions.json");
    let out = hetcal()
        .args(["curve", "--levels", "0.5,0.9", "--predictions"])
        .arg(&preds)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("expected,achieved"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    hetcal()
        .args([
            "train",
            "--dataset",
            "boston",
            "--estimator",
            "mc_dropout",
            "--registry",
        ])
        .arg(dir.path().join("absent.toml"))
        .arg("--out-dir")
        .arg(dir.path())
        .assert()
        .code(2);
    hetcal()
        .args([
            "train",
            "--dataset",
            "csv:/definitely/not/here.csv",
            "--estimator",
            "hnn",
        ])
        .arg("--out-dir")
        .arg(dir.path())
        .assert()
        .code(2);
}

#[test]
fn configuration_errors_exit_with_one() {
    hetcal()
        .args([
            "train",
            "--dataset",
            "boston",
            "--estimator",
            "dropout_hc",
            "--dropout-rate",
            "0",
        ])
        .assert()
        .code(1);
    hetcal().args(["train", "--unknown-flag"]).assert().code(1);
    hetcal()
        .args(["train", "--estimator", "mc_dropout"])
        .assert()
        .code(1);
    hetcal()
        .args([
            "train",
            "--dataset",
            "boston",
            "--estimator",
            "hnn",
            "--init",
            "xavier",
        ])
        .assert()
        .code(1);
    hetcal()
        .args(["sweep-p", "--dataset", "boston", "--rates", "0,0.2"])
        .assert()
        .code(1);
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    hetcal()
        .args([
            "train",
            "--dataset",
            "synthetic:linear_gauss",
            "--estimator",
            "mc_dropout",
        ])
        .args([
            "--epochs",
            "50",
            "--hidden-widths",
            "8,8",
            "--learning-rate",
            "1e300",
        ])
        .args(["--repeats", "1", "--out-dir"])
        .arg(dir.path())
        .assert()
        .code(3);
    let log = dir
        .path()
        .join("linear_gauss_mc_dropout_p0.2_r0/train_log.jsonl");
    assert!(log.exists());
}
