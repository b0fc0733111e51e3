//! Commands that do not train: `gradcheck`, `curves` and `heatmap`.

use std::path::Path;

use crl::eval::softmax_heatmap;
use crl::gradcheck::{layer_suite, loss_suite, BackwardSource, ComponentReport};
use crl::losses::{gradient_curve, CurveSample};
use crl::models::{load_checkpoint, Mode};
use crl::{LossKind, LossSpec};

use crate::config::RunConfig;
use crate::output::{write_csv, write_table};
use crate::{CliError, Result};

/// Runs the loss suite (`cases` per loss in `kinds`, all when empty) and
/// the layer suite (`layer_cases` per layer kind), printing one line per
/// component. Any breach is a verification failure.
pub fn cmd_gradcheck(
    kinds: &[LossKind],
    cases: usize,
    layer_cases: usize,
    seed: u64,
    printed_crl: bool,
) -> Result<Vec<ComponentReport>> {
    if cases == 0 {
        return Err(CliError::Usage("gradcheck needs at least one case".into()));
    }
    let kinds = if kinds.is_empty() { &LossKind::ALL[..] } else { kinds };
    let source = if printed_crl {
        BackwardSource::PrintedCrl
    } else {
        BackwardSource::Analytic
    };
    let mut reports = loss_suite(kinds, cases, seed, source)?;
    if layer_cases > 0 {
        reports.extend(layer_suite(layer_cases, seed)?);
    }
    println!("{:<16} {:>7} {:>12} {:>9}  status", "component", "cases", "worst", "limit");
    for r in &reports {
        println!(
            "{:<16} {:>7} {:>12.3e} {:>9.0e}  {}",
            r.name,
            r.cases,
            r.worst_rel_error,
            r.threshold,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            let example = r
                .failures
                .first()
                .map(|f| format!(", e.g. {} label {} logits {:?} (error {:.3e})", f.spec, f.label, f.logits, f.rel_error))
                .unwrap_or_default();
            format!("{}: {} of {} cases{example}", r.name, r.failure_count, r.cases)
        })
        .collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::Verification(failed.join("; ")))
    }
}

/// Writes `dL/dx_j` against `p_c` for CEL, NLLR and CRL at each beta, on the
/// grid `p_c = k / (grid + 1)`, `k = 1..=grid`.
pub fn cmd_curves(alpha: f64, betas: &[f64], p_j: f64, grid: usize, out: &Path) -> Result<Vec<CurveSample>> {
    if grid < 2 {
        return Err(CliError::Usage(format!("curve grid needs at least 2 points, got {grid}")));
    }
    let p_c: Vec<f64> = (1..=grid).map(|k| k as f64 / (grid + 1) as f64).collect();
    let mut specs = vec![LossSpec::cel(), LossSpec::nllr()];
    specs.extend(betas.iter().map(|&b| LossSpec::crl(alpha, b)));
    let curves = gradient_curve(&specs, &p_c, p_j)?;
    for (loss, p) in &curves.skipped {
        log::warn!("{loss}: no curve value at p_c = {p}");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        crate::output::ensure_dir(dir)?;
    }
    write_csv(out, &curves.samples)?;
    Ok(curves.samples)
}

/// Softmax rows of a checkpointed model for chosen test samples of the
/// dataset described by `cfg`.
pub fn cmd_heatmap(checkpoint: &Path, cfg: &RunConfig, ids: &[usize], out: &Path) -> Result<Vec<Vec<f64>>> {
    if ids.is_empty() {
        return Err(CliError::Usage("heatmap needs at least one sample id".into()));
    }
    let mut model = load_checkpoint(checkpoint)?;
    model.set_mode(Mode::Eval);
    let ds = cfg.load_dataset()?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= ds.test.len()) {
        return Err(CliError::Usage(format!(
            "sample id {bad} out of range, the test split has {} samples",
            ds.test.len()
        )));
    }
    let rows = softmax_heatmap(&model, ds.test.inputs(), ids)?;
    let header: Vec<String> = std::iter::once("sample_id".to_string())
        .chain((0..model.class_count()).map(|k| format!("p_{k}")))
        .collect();
    let table: Vec<Vec<String>> = ids
        .iter()
        .zip(&rows)
        .map(|(id, p)| std::iter::once(id.to_string()).chain(p.iter().map(f64::to_string)).collect())
        .collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        crate::output::ensure_dir(dir)?;
    }
    write_table(out, &header, &table)?;
    Ok(rows)
}
