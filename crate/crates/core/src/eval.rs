//! Classification metrics, multi-run aggregation and the paired t-test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::softmax_into;
use crate::models::{Mode, Model};
use crate::tensor::Tensor;

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn pct(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

pub fn top1_error(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    Ok(pct(preds.iter().zip(labels).filter(|(p, l)| p != l).count(), preds.len()))
}

/// A sample is correct when its label is among the `k` largest logits,
/// lower indices first on ties.
pub fn topk_error(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let n = labels.len();
    if logits.shape().len() != 2 || logits.rows() != n || n == 0 {
        return Err(Error::Shape(format!(
            "logits {:?} for {n} labels",
            logits.shape()
        )));
    }
    let classes = logits.row_len();
    if k == 0 || k > classes {
        return Err(Error::InvalidInput(format!("k = {k} outside 1..={classes}")));
    }
    let mut misses = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let target = row[label];
        // classes ranked ahead of the label: strictly larger, or equal with a lower index
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < label))
            .count();
        if ahead >= k {
            misses += 1;
        }
    }
    Ok(pct(misses, n))
}

/// `confusion[label][pred]` counts.
pub fn confusion(preds: &[usize], labels: &[usize], class_count: usize) -> Result<Vec<Vec<u64>>> {
    check_lengths(preds, labels)?;
    let mut m = vec![vec![0u64; class_count]; class_count];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= class_count || l >= class_count {
            return Err(Error::InvalidInput(format!(
                "class ({l}, {p}) out of range for {class_count} classes"
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub value_pct: f64,
    /// Per-class F1 in percent; `None` for classes with no true and no
    /// predicted instances, which are left out of the average.
    pub per_class: Vec<Option<f64>>,
}

/// Unweighted mean of per-class `2PR / (P + R)`. A precision or recall of
/// 0/0 counts as 0.
pub fn macro_f1_detail(preds: &[usize], labels: &[usize], class_count: usize) -> Result<MacroF1> {
    let m = confusion(preds, labels, class_count)?;
    let mut per_class = Vec::with_capacity(class_count);
    for c in 0..class_count {
        let tp = m[c][c] as f64;
        let actual: u64 = m[c].iter().sum();
        let predicted: u64 = m.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted == 0 {
            per_class.push(None);
            continue;
        }
        let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
        let (p, r) = (ratio(tp, predicted), ratio(tp, actual));
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        per_class.push(Some(100.0 * f1));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(MacroF1 {
        value_pct: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

pub fn macro_f1(preds: &[usize], labels: &[usize], class_count: usize) -> Result<f64> {
    macro_f1_detail(preds, labels, class_count).map(|f| f.value_pct)
}

/// Share of predictions within one ordinal class of the label.
pub fn one_off_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    Ok(pct(
        preds.iter().zip(labels).filter(|(p, l)| p.abs_diff(**l) <= 1).count(),
        preds.len(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1_error_pct: f64,
    pub macro_f1_pct: f64,
    pub one_off_acc_pct: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub n: usize,
    /// Classes left out of the macro-F1 average (no true or predicted samples).
    pub f1_excluded_classes: Vec<usize>,
}

impl MetricsReport {
    /// `ordinal` adds the one-category-off accuracy.
    pub fn compute(preds: &[usize], labels: &[usize], class_count: usize, ordinal: bool) -> Result<Self> {
        let f1 = macro_f1_detail(preds, labels, class_count)?;
        Ok(MetricsReport {
            top1_error_pct: top1_error(preds, labels)?,
            macro_f1_pct: f1.value_pct,
            one_off_acc_pct: if ordinal { Some(one_off_accuracy(preds, labels)?) } else { None },
            confusion: confusion(preds, labels, class_count)?,
            n: preds.len(),
            f1_excluded_classes: (0..class_count).filter(|&c| f1.per_class[c].is_none()).collect(),
        })
    }
}

/// Softmax rows for the samples at `ids` (model must be in eval mode).
pub fn softmax_heatmap(model: &Model, inputs: &Tensor, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
    if model.mode() != Mode::Eval {
        return Err(Error::State("heatmaps need an eval-mode model".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= inputs.rows()) {
        return Err(Error::InvalidInput(format!(
            "sample id {bad} out of range for {} samples",
            inputs.rows()
        )));
    }
    let logits = model.infer(&inputs.select_rows(ids))?;
    Ok((0..ids.len())
        .map(|i| {
            let mut p = vec![0.0; logits.row_len()];
            softmax_into(logits.row(i), &mut p);
            p
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    pub std: f64,
    pub variance: f64,
    pub n: usize,
    /// Set when `n == 1`, so the spread is undefined.
    pub degenerate: bool,
}

pub fn aggregate_runs(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::InvalidInput("no runs to aggregate".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(Aggregate {
        mean,
        std: variance.sqrt(),
        variance,
        n,
        degenerate: n == 1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub mean_a: f64,
    pub mean_b: f64,
    pub std_a: f64,
    pub std_b: f64,
    pub t_stat: f64,
    pub dof: usize,
    /// Two-sided.
    pub p_value: f64,
    pub n_pairs: usize,
    /// The differences have zero variance, so `t` is infinite (p = 0) or
    /// undefined (all differences zero, p = 1).
    pub degenerate: bool,
}

/// Paired Student's t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired scores", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput(format!("a paired t-test needs >= 2 pairs, got {}", a.len())));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let diff = aggregate_runs(&d)?;
    let (sa, sb) = (aggregate_runs(a)?, aggregate_runs(b)?);
    let dof = n - 1;
    let (t_stat, p_value, degenerate) = if diff.variance == 0.0 {
        if diff.mean == 0.0 {
            (0.0, 1.0, true)
        } else {
            (f64::INFINITY.copysign(diff.mean), 0.0, true)
        }
    } else {
        let t = diff.mean / (diff.std / (n as f64).sqrt());
        (t, student_t_two_sided(t, dof as f64), false)
    };
    Ok(TTestResult {
        mean_a: sa.mean,
        mean_b: sb.mean,
        std_a: sa.std,
        std_b: sb.std,
        t_stat,
        dof,
        p_value,
        n_pairs: n,
        degenerate,
    })
}

/// `P(|T| >= |t|)` for Student's t with `dof` degrees of freedom:
/// `I_{dof/(dof+t^2)}(dof/2, 1/2)`.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    regularized_incomplete_beta(x, dof / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms), accurate to ~1e-15 relative
/// for positive arguments.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` by the modified Lentz continued fraction, using the
/// symmetry `I_x(a, b) = 1 - I_{1-x}(b, a)` where it converges faster.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_cf(x, a, b) / a).min(1.0)
    } else {
        (1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b).max(0.0)
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let fix = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / fix(1.0 - (a + b) * x / (a + 1.0));
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 / fix(1.0 + even * d);
        c = fix(1.0 + even / c);
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 / fix(1.0 + odd * d);
        c = fix(1.0 + odd / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
