//! Training-based commands: `train`, `sweep` and `compare`.

use std::path::Path;
use std::time::Instant;

use crl::data::Dataset;
use crl::eval::{aggregate_runs, paired_t_test, Aggregate, MetricsReport, TTestResult};
use crl::models::save_checkpoint;
use crl::optim::{fit, EpochLog};
use crl::{build_model, LossSpec, Model};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{
    ensure_dir, write_csv, write_json, write_table, MetricsRow, RunReport, SeedReport, Summary, TOOL_VERSION,
};
use crate::{CliError, Result};

pub struct SeedOutcome {
    pub seed: u64,
    pub logs: Vec<EpochLog>,
    pub metrics: MetricsReport,
    pub model: Model,
}

/// Builds the configured model with `seed`, trains it with `loss`, and
/// scores the test split. The seed drives both initialization and data order.
pub fn train_seed(cfg: &RunConfig, ds: &Dataset, loss: &LossSpec, seed: u64) -> Result<SeedOutcome> {
    let mut model = build_model(&cfg.model, &ds.input_shape, ds.class_count, seed)?;
    let logs = fit(&mut model, ds, loss, &cfg.optim, seed, cfg.augment.as_ref(), |log| {
        log::info!(
            "{loss} seed {seed} epoch {}/{}: loss {:.5}, test error {:.2}%",
            log.epoch,
            cfg.optim.epochs,
            log.train_loss,
            log.test_error_pct
        );
        Ok(())
    })?;
    let preds = model.predict(ds.test.inputs())?;
    let metrics = MetricsReport::compute(&preds, ds.test.labels(), ds.class_count, cfg.ordinal)?;
    Ok(SeedOutcome {
        seed,
        logs,
        metrics,
        model,
    })
}

fn summarize(outcomes: &[SeedOutcome]) -> Result<Summary> {
    let pick = |f: fn(&MetricsReport) -> f64| outcomes.iter().map(|o| f(&o.metrics)).collect::<Vec<_>>();
    Ok(Summary {
        top1_error_pct: aggregate_runs(&pick(|m| m.top1_error_pct))?,
        macro_f1_pct: aggregate_runs(&pick(|m| m.macro_f1_pct))?,
    })
}

/// Trains every configured seed and writes, under `out`:
/// `epochs_seed{S}.csv`, `checkpoint_seed{S}.crlm`, `metrics.csv`,
/// `config.json` and `report.json`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    let started = Instant::now();
    ensure_dir(out)?;
    let ds = cfg.load_dataset()?;
    let mut outcomes = Vec::new();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let o = train_seed(cfg, &ds, &cfg.loss, seed)?;
        write_csv(&out.join(format!("epochs_seed{seed}.csv")), &o.logs)?;
        let checkpoint = out.join(format!("checkpoint_seed{seed}.crlm"));
        save_checkpoint(&o.model, &checkpoint)?;
        log::info!("seed {seed}: test error {:.2}%", o.metrics.top1_error_pct);
        runs.push(SeedReport {
            seed,
            epochs: o.logs.clone(),
            metrics: o.metrics.clone(),
            checkpoint,
        });
        outcomes.push(o);
    }
    let rows: Vec<MetricsRow> = outcomes
        .iter()
        .map(|o| MetricsRow::new(o.seed, &cfg.loss, &o.metrics))
        .collect();
    write_csv(&out.join("metrics.csv"), &rows)?;
    cfg.write(&out.join("config.json"))?;
    let report = RunReport {
        tool_version: TOOL_VERSION.to_string(),
        config: cfg.clone(),
        runs,
        summary: summarize(&outcomes)?,
        ttest: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// One line of `sweep.csv`. The `beta = 0` cell does not depend on alpha
/// and is written once with alpha `*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: String,
    pub beta: f64,
    pub seed: u64,
    pub top1_error_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `pivot[b][a]`: mean error over seeds at `(alphas[a], betas[b])`.
    pub pivot: Vec<Vec<f64>>,
}

/// Trains CRL at every `(alpha, beta)` for every seed and writes
/// `sweep.csv` plus the mean table `sweep_pivot.csv` (rows beta, columns
/// alpha).
pub fn cmd_sweep(cfg: &RunConfig, alphas: &[f64], betas: &[f64], out: &Path) -> Result<SweepResult> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(CliError::Usage("sweep needs at least one alpha and one beta".into()));
    }
    for &v in alphas.iter().chain(betas) {
        if !(v.is_finite() && v >= 0.0) {
            return Err(CliError::Usage(format!("sweep values must be >= 0, got {v}")));
        }
    }
    ensure_dir(out)?;
    let ds = cfg.load_dataset()?;
    let mut rows = Vec::new();
    let mut pivot = Vec::with_capacity(betas.len());
    for &beta in betas {
        let cells: Vec<(String, f64)> = if beta == 0.0 {
            vec![("*".to_string(), alphas[0])]
        } else {
            alphas.iter().map(|&a| (a.to_string(), a)).collect()
        };
        let mut means = Vec::with_capacity(cells.len());
        for (label, alpha) in cells {
            let loss = LossSpec::crl(alpha, beta);
            let mut errors = Vec::new();
            for &seed in &cfg.seeds {
                let err = train_seed(cfg, &ds, &loss, seed)?.metrics.top1_error_pct;
                log::info!("sweep alpha {label} beta {beta} seed {seed}: {err:.2}%");
                rows.push(SweepRow {
                    alpha: label.clone(),
                    beta,
                    seed,
                    top1_error_pct: err,
                });
                errors.push(err);
            }
            means.push(aggregate_runs(&errors)?.mean);
        }
        if beta == 0.0 {
            means = vec![means[0]; alphas.len()];
        }
        pivot.push(means);
    }
    write_csv(&out.join("sweep.csv"), &rows)?;
    let header: Vec<String> = std::iter::once("beta".to_string())
        .chain(alphas.iter().map(|a| format!("alpha={a}")))
        .collect();
    let table: Vec<Vec<String>> = betas
        .iter()
        .zip(&pivot)
        .map(|(b, means)| std::iter::once(b.to_string()).chain(means.iter().map(f64::to_string)).collect())
        .collect();
    write_table(&out.join("sweep_pivot.csv"), &header, &table)?;
    cfg.write(&out.join("config.json"))?;
    Ok(SweepResult {
        rows,
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        pivot,
    })
}

/// `ttest.json`: both arms' aggregates and the paired test on top-1 error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub loss_a: String,
    pub loss_b: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub aggregate_a: Aggregate,
    pub aggregate_b: Aggregate,
    #[serde(flatten)]
    pub ttest: TTestResult,
}

/// Trains both losses on seeds `s0, s0+1, ...` (the first configured seed
/// onward), so run `i` of each arm shares initialization and data order.
/// Writes `compare.csv` (metrics rows, arm A first) and `ttest.json`.
pub fn cmd_compare(cfg: &RunConfig, loss_a: &LossSpec, loss_b: &LossSpec, runs: usize, out: &Path) -> Result<Comparison> {
    if runs < 2 {
        return Err(CliError::Usage(format!("compare needs at least 2 runs, got {runs}")));
    }
    ensure_dir(out)?;
    let ds = cfg.load_dataset()?;
    let seeds: Vec<u64> = (0..runs as u64).map(|i| cfg.seeds[0] + i).collect();
    let mut rows = Vec::new();
    let mut errors = [Vec::new(), Vec::new()];
    for (arm, loss) in [loss_a, loss_b].into_iter().enumerate() {
        for &seed in &seeds {
            let o = train_seed(cfg, &ds, loss, seed)?;
            log::info!("{loss} seed {seed}: {:.2}%", o.metrics.top1_error_pct);
            errors[arm].push(o.metrics.top1_error_pct);
            rows.push(MetricsRow::new(seed, loss, &o.metrics));
        }
    }
    write_csv(&out.join("compare.csv"), &rows)?;
    let comparison = Comparison {
        loss_a: loss_a.to_string(),
        loss_b: loss_b.to_string(),
        metric: "top1_error_pct".into(),
        seeds,
        aggregate_a: aggregate_runs(&errors[0])?,
        aggregate_b: aggregate_runs(&errors[1])?,
        ttest: paired_t_test(&errors[0], &errors[1])?,
    };
    write_json(&out.join("ttest.json"), &comparison)?;
    cfg.write(&out.join("config.json"))?;
    Ok(comparison)
}
