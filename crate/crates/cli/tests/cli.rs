use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crl_cli::output::read_csv;
use crl_cli::runs::SweepRow;

const BLOBS: &str = r#"{
  "dataset": {"name": "blobs", "classes": 3, "per_class": 60, "dim": 4, "separation": 3.0, "seed": 5},
  "model": "mlp",
  "loss": "crl:1.5:1",
  "optim": {"epochs": 3, "batch_size": 16},
  "seeds": [0, 1]
}"#;

fn crl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CRL_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), BLOBS);
    let out = dir.path().join("run");
    let res = crl(&["train", "--config", s(&cfg), "--output-dir", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for f in [
        "metrics.csv",
        "report.json",
        "config.json",
        "epochs_seed0.csv",
        "epochs_seed1.csv",
        "checkpoint_seed0.crlm",
        "checkpoint_seed1.crlm",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let rows: Vec<crl_cli::output::MetricsRow> = read_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.loss == "crl" && r.alpha == 1.5 && r.beta == 1.0));
    let epochs: Vec<crl::optim::EpochLog> = read_csv(&out.join("epochs_seed1.csv")).unwrap();
    assert_eq!(epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
}

#[test]
fn seed_and_loss_overrides_and_env_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), BLOBS);
    let out = dir.path().join("from_env");
    let res = Command::new(env!("CARGO_BIN_EXE_crl"))
        .args(["train", "--config", s(&cfg), "--seed", "7", "--loss", "nllr"])
        .env("CRL_OUTPUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows: Vec<crl_cli::output::MetricsRow> = read_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].seed, rows[0].loss.as_str()), (7, "nllr"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), BLOBS);
    let out = dir.path().join("x");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--config", s(&cfg), "--loss", "focal", "--output-dir", s(&out)],
        vec!["train", "--config", s(&cfg), "--loss", "crl:-1:1", "--output-dir", s(&out)],
        vec!["train", "--config", "/nonexistent/config.json"],
        vec!["compare", "--config", s(&cfg), "--runs", "1", "--output-dir", s(&out)],
        vec!["curves", "--grid", "1", "--out", "/tmp/unused.csv"],
        vec!["gradcheck", "--cases", "0"],
        vec!["no-such-command"],
    ];
    for args in cases {
        assert_eq!(code(&crl(&args)), 2, "{args:?}");
    }
    let bad = config(dir.path(), &BLOBS.replace("\"epochs\"", "\"epoch\""));
    assert_eq!(code(&crl(&["train", "--config", s(&bad), "--output-dir", s(&out)])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &BLOBS.replace(r#""epochs": 3"#, r#""epochs": 3, "lr0": 1e300"#));
    let res = crl(&["train", "--config", s(&cfg), "--output-dir", s(&dir.path().join("d"))]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn gradcheck_passes_and_printed_sign_fails() {
    let ok = crl(&["gradcheck", "--cases", "100", "--layer-cases", "2"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(stdout.lines().filter(|l| l.ends_with(" ok")).count(), 5 + 6);
    let bad = crl(&["gradcheck", "--cases", "100", "--layer-cases", "0", "--printed-crl"]);
    assert_eq!(code(&bad), 1);
    let stdout = String::from_utf8_lossy(&bad.stdout);
    let failing: Vec<&str> = stdout.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1);
    assert!(failing[0].starts_with("loss/crl"));
}

#[test]
fn sweep_writes_beta_zero_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &BLOBS.replace("[0, 1]", "[0]"));
    let out = dir.path().join("sweep");
    let res = crl(&["sweep", "--config", s(&cfg), "--alpha", "1,2", "--beta", "0,0.5", "--output-dir", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows: Vec<SweepRow> = read_csv(&out.join("sweep.csv")).unwrap();
    let alphas: Vec<&str> = rows.iter().map(|r| r.alpha.as_str()).collect();
    assert_eq!(alphas, ["*", "1", "2"]);
    let pivot = std::fs::read_to_string(out.join("sweep_pivot.csv")).unwrap();
    let lines: Vec<&str> = pivot.lines().collect();
    assert_eq!(lines[0], "beta,alpha=1,alpha=2");
    let zero: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(zero[0], "0");
    assert_eq!(zero[1], zero[2]);
}

#[test]
fn compare_writes_paired_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), BLOBS);
    let out = dir.path().join("cmp");
    let res = crl(&["compare", "--config", s(&cfg), "--runs", "3", "--output-dir", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows: Vec<crl_cli::output::MetricsRow> = read_csv(&out.join("compare.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), [0, 1, 2, 0, 1, 2]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ttest.json")).unwrap()).unwrap();
    assert_eq!(json["n_pairs"], 3);
    assert_eq!(json["loss_a"], "cel");
    assert!(json["p_value"].as_f64().is_some_and(|p| (0.0..=1.0).contains(&p)));
}

#[test]
fn curves_cli_writes_all_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.csv");
    let res = crl(&["curves", "--grid", "9", "--beta", "0.5,1", "--out", s(&out)]);
    assert_eq!(code(&res), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 9 * 4);
    assert!(text.starts_with("loss_label,alpha,beta,p_c,value_printed,value_analytic"));
}

#[test]
fn heatmap_rows_are_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &BLOBS.replace("[0, 1]", "[0]"));
    let run = dir.path().join("run");
    assert_eq!(code(&crl(&["train", "--config", s(&cfg), "--output-dir", s(&run)])), 0);
    let ckpt = run.join("checkpoint_seed0.crlm");
    let out = dir.path().join("h.csv");
    let res = crl(&["heatmap", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--ids", "0,5,9", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sample_id,p_0,p_1,p_2"));
    for (line, id) in lines.zip(["0", "5", "9"]) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], id);
        let sum: f64 = cells[1..].iter().map(|c| c.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    let bad = crl(&["heatmap", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--ids", "100000", "--out", s(&out)]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn sweep_grid_collapses_beta_zero_and_pivot_matches_long_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &BLOBS.replace(r#""epochs": 3"#, r#""epochs": 1"#));
    let out = dir.path().join("grid");
    let res = crl(&[
        "sweep", "--config", s(&cfg), "--alpha", "0,1,1.5,2", "--beta", "0,0.25,0.5,0.75,1,1.25", "--output-dir", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows: Vec<SweepRow> = read_csv(&out.join("sweep.csv")).unwrap();
    for seed in [0, 1] {
        assert_eq!(rows.iter().filter(|r| r.seed == seed).count(), 21);
    }
    let pivot = std::fs::read_to_string(out.join("sweep_pivot.csv")).unwrap();
    let mut lines = pivot.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').skip(1).map(|h| h.trim_start_matches("alpha=").to_string()).collect();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let beta: f64 = cells[0].parse().unwrap();
        for (alpha, cell) in header.iter().zip(&cells[1..]) {
            let key = if beta == 0.0 { "*" } else { alpha.as_str() };
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.beta == beta && r.alpha == key)
                .map(|r| r.top1_error_pct)
                .collect();
            assert_eq!(errs.len(), 2);
            let mean = crl::eval::aggregate_runs(&errs).unwrap().mean;
            assert_eq!(cell.parse::<f64>().unwrap(), mean, "beta {beta} alpha {alpha}");
        }
    }
}

#[test]
fn compare_against_itself_is_degenerate_and_means_match_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), BLOBS);
    let out = dir.path().join("self");
    let res = crl(&["compare", "--config", s(&cfg), "--loss-a", "crl:2:0.5", "--loss-b", "crl:2:0.5", "--runs", "3", "--output-dir", s(&out)]);
    assert_eq!(code(&res), 0);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ttest.json")).unwrap()).unwrap();
    assert_eq!(json["p_value"], 1.0);
    assert_eq!(json["degenerate"], true);

    let out = dir.path().join("pair");
    let res = crl(&["compare", "--config", s(&cfg), "--loss-a", "cel", "--loss-b", "nllr", "--runs", "3", "--output-dir", s(&out)]);
    assert_eq!(code(&res), 0);
    let rows: Vec<crl_cli::output::MetricsRow> = read_csv(&out.join("compare.csv")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ttest.json")).unwrap()).unwrap();
    for (arm, key) in [("cel", "aggregate_a"), ("nllr", "aggregate_b")] {
        let errs: Vec<f64> = rows.iter().filter(|r| r.loss == arm).map(|r| r.top1_error_pct).collect();
        let agg = crl::eval::aggregate_runs(&errs).unwrap();
        assert_eq!(json[key]["mean"].as_f64().unwrap(), agg.mean);
        assert_eq!(json[key]["std"].as_f64().unwrap(), agg.std);
    }
}

#[test]
fn heatmap_argmax_matches_checkpoint_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = config(dir.path(), &BLOBS.replace("[0, 1]", "[4]"));
    let run = dir.path().join("run");
    assert_eq!(code(&crl(&["train", "--config", s(&cfg_path), "--output-dir", s(&run)])), 0);
    let cfg = crl_cli::RunConfig::load(&cfg_path).unwrap();
    let ckpt = run.join("checkpoint_seed4.crlm");
    let ds = cfg.load_dataset().unwrap();
    let ids: Vec<usize> = (0..ds.test.len()).collect();
    let rows = crl_cli::diagnostics::cmd_heatmap(&ckpt, &cfg, &ids, &dir.path().join("h.csv")).unwrap();
    let preds = crl::models::load_checkpoint(&ckpt).unwrap().predict(ds.test.inputs()).unwrap();
    let argmax: Vec<usize> = rows.iter().map(|r| crl::models::argmax(r)).collect();
    assert_eq!(argmax, preds);
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), BLOBS);
    let first = dir.path().join("first");
    assert_eq!(code(&crl(&["train", "--config", s(&cfg), "--seed", "9", "--loss", "cce", "--output-dir", s(&first)])), 0);
    let second = dir.path().join("second");
    let echo = first.join("config.json");
    assert_eq!(code(&crl(&["train", "--config", s(&echo), "--output-dir", s(&second)])), 0);
    for f in ["metrics.csv", "checkpoint_seed9.crlm", "config.json"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_output_dir_beats_env_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &BLOBS.replace(r#""seeds": [0, 1]"#, r#""seeds": [0], "output_dir": "from_config""#));
    let env_dir = dir.path().join("from_env");
    let res = Command::new(env!("CARGO_BIN_EXE_crl"))
        .args(["train", "--config", s(&cfg)])
        .env("CRL_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(dir.path().join("from_config/metrics.csv").is_file());
    assert!(!env_dir.exists());
}
