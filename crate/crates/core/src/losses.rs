//! Classification losses over softmax posteriors.
//!
//! Five variants share one evaluation path: cross entropy (CEL), binary
//! cross entropy (BCE), categorical cross entropy with competing-class terms
//! (CCE), the negative log likelihood ratio (NLLR), and the competing ratio
//! loss (CRL)
//!
//! ```text
//! CRL = beta * ln(alpha + sum_{k != c} p_k) - ln p_c
//! ```
//!
//! All logarithms are natural. The competing mass `1 - p_c` is always
//! accumulated as the sum of the competing probabilities, never by
//! subtraction, so the ratio losses stay accurate as `p_c -> 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to any probability that reaches a logarithm outside
/// the log-softmax path.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cel,
    Bce,
    Cce,
    Nllr,
    Crl,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Cel,
        LossKind::Bce,
        LossKind::Cce,
        LossKind::Nllr,
        LossKind::Crl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cel => "cel",
            LossKind::Bce => "bce",
            LossKind::Cce => "cce",
            LossKind::Nllr => "nllr",
            LossKind::Crl => "crl",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cel" | "ce" => Ok(LossKind::Cel),
            "bce" => Ok(LossKind::Bce),
            "cce" => Ok(LossKind::Cce),
            "nllr" => Ok(LossKind::Nllr),
            "crl" => Ok(LossKind::Crl),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

/// Loss variant plus the two CRL hyperparameters. `alpha` and `beta` are
/// carried for every variant but only read by CRL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
}

impl LossSpec {
    pub const fn cel() -> Self {
        LossSpec {
            kind: LossKind::Cel,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub const fn bce() -> Self {
        LossSpec {
            kind: LossKind::Bce,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub const fn cce() -> Self {
        LossSpec {
            kind: LossKind::Cce,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub const fn nllr() -> Self {
        LossSpec {
            kind: LossKind::Nllr,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub const fn crl(alpha: f64, beta: f64) -> Self {
        LossSpec {
            kind: LossKind::Crl,
            alpha,
            beta,
        }
    }

    /// Checks the hyperparameters. CRL with `alpha < 1` is accepted but
    /// logged, since the loss can then go negative.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.kind == LossKind::Crl && self.alpha < 1.0 && self.beta > 0.0 {
            log::warn!(
                "CRL configured with alpha = {} < 1; loss values are not guaranteed positive",
                self.alpha
            );
        }
        Ok(())
    }

    /// Parses `cel`, `nllr`, `crl` (alpha 1.5, beta 1), or `crl:ALPHA:BETA`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind: LossKind = parts.next().unwrap_or_default().parse()?;
        let rest: Vec<&str> = parts.collect();
        let spec = match (kind, rest.as_slice()) {
            (LossKind::Crl, []) => LossSpec::crl(1.5, 1.0),
            (LossKind::Crl, [a, b]) => {
                let alpha = a
                    .parse()
                    .map_err(|_| Error::Config(format!("bad alpha '{a}' in '{s}'")))?;
                let beta = b
                    .parse()
                    .map_err(|_| Error::Config(format!("bad beta '{b}' in '{s}'")))?;
                LossSpec::crl(alpha, beta)
            }
            (kind, []) => LossSpec {
                kind,
                alpha: 0.0,
                beta: 0.0,
            },
            _ => return Err(Error::Config(format!("cannot parse loss '{s}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn check_classes(&self, classes: usize) -> Result<()> {
        if self.kind == LossKind::Bce && classes != 2 {
            return Err(Error::Config(format!(
                "BCE needs exactly 2 classes, got {classes}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LossKind::Crl => write!(f, "crl:{}:{}", self.alpha, self.beta),
            k => f.write_str(k.name()),
        }
    }
}

/// Pre-softmax scores for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_logits(&values)?;
        Ok(LogitVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Softmax posteriors. Entries may underflow to exactly zero for extreme
/// logit gaps; they always sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHotLabel {
    class_index: usize,
    class_count: usize,
}

impl OneHotLabel {
    pub fn new(class_index: usize, class_count: usize) -> Result<Self> {
        if class_index >= class_count {
            return Err(Error::InvalidInput(format!(
                "label {class_index} out of range for {class_count} classes"
            )));
        }
        Ok(OneHotLabel {
            class_index,
            class_count,
        })
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }
}

/// dL/dx for each logit.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_logits(values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 logits, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "logit {i} is not finite ({})",
            values[i]
        )));
    }
    Ok(())
}

fn check_label(logits: &LogitVector, label: &OneHotLabel) -> Result<()> {
    if logits.len() != label.class_count {
        return Err(Error::Shape(format!(
            "{} logits for a {}-class label",
            logits.len(),
            label.class_count
        )));
    }
    Ok(())
}

/// Max-shifted exponentials of one logit row.
struct Shifted {
    /// exp(x_k - max)
    exps: Vec<f64>,
    argmax: usize,
    /// ln of the partition sum of `exps`
    log_z: f64,
    z: f64,
    max: f64,
}

impl Shifted {
    fn new(logits: &[f64]) -> Self {
        let mut argmax = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[argmax] {
                argmax = k;
            }
        }
        let max = logits[argmax];
        let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        // exps[argmax] == 1, so ln_1p keeps precision when the rest is tiny.
        let rest: f64 = exps
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != argmax)
            .map(|(_, &e)| e)
            .sum();
        Shifted {
            exps,
            argmax,
            log_z: rest.ln_1p(),
            z: 1.0 + rest,
            max,
        }
    }

    fn log_prob(&self, logits: &[f64], k: usize) -> f64 {
        logits[k] - self.max - self.log_z
    }

    fn prob(&self, k: usize) -> f64 {
        self.exps[k] / self.z
    }

    /// Total probability of every class except `c`.
    fn competing_mass(&self, c: usize) -> f64 {
        let sum: f64 = self
            .exps
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != c)
            .map(|(_, &e)| e)
            .sum();
        sum / self.z
    }
}

pub fn softmax(logits: &LogitVector) -> ProbVector {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits.as_slice(), &mut out);
    ProbVector(out)
}

pub fn log_softmax(logits: &LogitVector) -> Vec<f64> {
    let x = logits.as_slice();
    let sh = Shifted::new(x);
    (0..x.len()).map(|k| sh.log_prob(x, k)).collect()
}

/// Slice form of [`softmax`] for callers that already hold a validated row.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let sh = Shifted::new(logits);
    for (k, o) in out.iter_mut().enumerate() {
        *o = sh.prob(k);
    }
}

pub fn loss_forward(spec: &LossSpec, logits: &LogitVector, label: &OneHotLabel) -> Result<f64> {
    check_label(logits, label)?;
    spec.check_classes(logits.len())?;
    Ok(evaluate(spec, logits.as_slice(), label.class_index, None))
}

pub fn loss_backward(
    spec: &LossSpec,
    logits: &LogitVector,
    label: &OneHotLabel,
) -> Result<GradientVector> {
    check_label(logits, label)?;
    spec.check_classes(logits.len())?;
    let mut grad = vec![0.0; logits.len()];
    evaluate(spec, logits.as_slice(), label.class_index, Some(&mut grad));
    Ok(GradientVector(grad))
}

/// Computes the loss of one row and, when `grad` is given, writes dL/dx into
/// it. The row must already be validated against `spec`.
pub(crate) fn evaluate(spec: &LossSpec, x: &[f64], c: usize, grad: Option<&mut [f64]>) -> f64 {
    let sh = Shifted::new(x);
    let log_pc = sh.log_prob(x, c);
    let cel = -log_pc;
    let s = sh.competing_mass(c);

    let (loss, scale) = match spec.kind {
        LossKind::Cel => (cel, 1.0),
        LossKind::Bce => {
            let y = if c == 1 { 1.0 } else { 0.0 };
            let loss = -(y * sh.log_prob(x, 1) + (1.0 - y) * sh.log_prob(x, 0));
            (loss, 1.0)
        }
        LossKind::Nllr => {
            let s = s.max(PROB_FLOOR);
            (s.ln() + cel, 1.0 / s)
        }
        LossKind::Crl => {
            let denom = (spec.alpha + s).max(PROB_FLOOR);
            let loss = if spec.beta == 0.0 {
                cel
            } else {
                spec.beta * denom.ln() + cel
            };
            let p_c = sh.prob(c);
            (loss, 1.0 + spec.beta * p_c / denom)
        }
        LossKind::Cce => return cce(&sh, x, c, s, cel, grad),
    };

    if let Some(g) = grad {
        for (j, gj) in g.iter_mut().enumerate() {
            // p_c - 1 is taken as -s to avoid cancellation.
            let residual = if j == c { -s } else { sh.prob(j) };
            *gj = scale * residual;
        }
    }
    loss
}

/// 1 - p_k, summing the other classes for the dominant one.
fn complement(sh: &Shifted, k: usize) -> f64 {
    if k == sh.argmax {
        sh.competing_mass(k)
    } else {
        1.0 - sh.prob(k)
    }
}

fn cce(sh: &Shifted, x: &[f64], c: usize, s: f64, cel: f64, grad: Option<&mut [f64]>) -> f64 {
    let n = x.len();
    let mut loss = cel;
    // sum_{k != c} p_k / (1 - p_k)
    let mut odds_sum = 0.0;
    for k in (0..n).filter(|&k| k != c) {
        let log_q = if k == sh.argmax {
            complement(sh, k).max(PROB_FLOOR).ln()
        } else {
            (-sh.prob(k)).ln_1p()
        };
        loss -= log_q;
        odds_sum += sh.prob(k) / complement(sh, k).max(PROB_FLOOR);
    }
    if let Some(g) = grad {
        for (j, gj) in g.iter_mut().enumerate() {
            let p_j = sh.prob(j);
            *gj = if j == c {
                -s - p_j * odds_sum
            } else {
                p_j + p_j / complement(sh, j).max(PROB_FLOOR) - p_j * odds_sum
            };
        }
    }
    loss
}

/// CRL backward with the sign-flipped multiplier `1 - beta p_c / (alpha + 1 - p_c)`
/// in place of the analytic `1 + ...`. Gradient checks must reject it; it is
/// kept as a mutation target.
pub fn printed_crl_backward(
    spec: &LossSpec,
    logits: &LogitVector,
    label: &OneHotLabel,
) -> Result<GradientVector> {
    check_label(logits, label)?;
    let x = logits.as_slice();
    let c = label.class_index;
    let sh = Shifted::new(x);
    let s = sh.competing_mass(c);
    let denom = (spec.alpha + s).max(PROB_FLOOR);
    let scale = 1.0 - spec.beta * sh.prob(c) / denom;
    let grad = (0..x.len())
        .map(|j| scale * if j == c { -s } else { sh.prob(j) })
        .collect();
    Ok(GradientVector(grad))
}

/// Central differences of [`loss_forward`], one coordinate at a time.
pub fn finite_diff_grad(
    spec: &LossSpec,
    logits: &LogitVector,
    label: &OneHotLabel,
    h: f64,
) -> Result<GradientVector> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidInput(format!("step h must be > 0, got {h}")));
    }
    check_label(logits, label)?;
    spec.check_classes(logits.len())?;
    let mut x = logits.as_slice().to_vec();
    let c = label.class_index;
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let orig = x[j];
        x[j] = orig + h;
        let up = evaluate(spec, &x, c, None);
        x[j] = orig - h;
        let down = evaluate(spec, &x, c, None);
        x[j] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(GradientVector(grad))
}

/// Mean loss over a batch and per-sample gradients scaled by `1/N`.
pub fn batch_loss(
    spec: &LossSpec,
    logits: &[LogitVector],
    labels: &[OneHotLabel],
) -> Result<(f64, Vec<GradientVector>)> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let classes = logits[0].len();
    spec.check_classes(classes)?;
    let inv_n = 1.0 / logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, label) in logits.iter().zip(labels) {
        if row.len() != classes {
            return Err(Error::Shape(format!(
                "batch mixes {classes} and {} classes",
                row.len()
            )));
        }
        check_label(row, label)?;
        let mut g = vec![0.0; classes];
        total += evaluate(spec, row.as_slice(), label.class_index, Some(&mut g));
        g.iter_mut().for_each(|v| *v *= inv_n);
        grads.push(GradientVector(g));
    }
    Ok((total * inv_n, grads))
}

/// Flat-row variant of [`batch_loss`] used by the training loop. `logits`
/// is row-major `[labels.len(), classes]`; `grad` receives the same layout.
pub fn batch_loss_rows(
    spec: &LossSpec,
    logits: &[f64],
    classes: usize,
    labels: &[usize],
    grad: &mut [f64],
) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if classes < 2 || logits.len() != n * classes || grad.len() != logits.len() {
        return Err(Error::Shape(format!(
            "logits of length {} do not form {n} rows of {classes} classes",
            logits.len()
        )));
    }
    spec.check_classes(classes)?;
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits[i * classes..(i + 1) * classes];
        check_logits(row)?;
        let g = &mut grad[i * classes..(i + 1) * classes];
        total += evaluate(spec, row, label, Some(&mut *g));
        g.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok(total * inv_n)
}

/// One point of a gradient-versus-`p_c` curve for a competing class `j`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveSample {
    pub loss_label: String,
    pub alpha: f64,
    pub beta: f64,
    pub p_c: f64,
    /// dL/dx_j with the ratio term's sign flipped: `(1 - r) p_j` for CRL,
    /// `(1 - p_c / (1 - p_c)) p_j` for NLLR.
    pub value_printed: f64,
    /// dL/dx_j from direct differentiation of the loss.
    pub value_analytic: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    pub samples: Vec<CurveSample>,
    /// `(loss_label, p_c)` points dropped because a denominator vanished.
    pub skipped: Vec<(String, f64)>,
}

/// Gradient of each loss with respect to a competing logit `x_j` as a
/// function of `p_c`, with `p_j` held fixed. Both the sign-flipped and the
/// analytic forms are emitted so the two can be plotted side by side.
pub fn gradient_curve(specs: &[LossSpec], p_c_grid: &[f64], p_j: f64) -> Result<Curves> {
    if !(p_j > 0.0 && p_j < 1.0) {
        return Err(Error::InvalidInput(format!("p_j must lie in (0,1), got {p_j}")));
    }
    if let Some(&bad) = p_c_grid.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidInput(format!("p_c grid value {bad} outside (0,1)")));
    }
    let mut curves = Curves::default();
    for spec in specs {
        spec.validate()?;
        let label = spec.kind.name().to_string();
        for &p_c in p_c_grid {
            let point = match spec.kind {
                LossKind::Cel => Some((p_j, p_j)),
                LossKind::Nllr => {
                    let rest = 1.0 - p_c;
                    (rest > 0.0).then(|| ((1.0 - p_c / rest) * p_j, p_j / rest))
                }
                LossKind::Crl => {
                    let denom = spec.alpha + 1.0 - p_c;
                    (denom > 0.0).then(|| {
                        let ratio = spec.beta * p_c / denom;
                        ((1.0 - ratio) * p_j, (1.0 + ratio) * p_j)
                    })
                }
                LossKind::Bce | LossKind::Cce => {
                    return Err(Error::Config(format!(
                        "no gradient curve defined for {}",
                        spec.kind
                    )))
                }
            };
            match point {
                Some((printed, analytic)) => curves.samples.push(CurveSample {
                    loss_label: label.clone(),
                    alpha: spec.alpha,
                    beta: spec.beta,
                    p_c,
                    value_printed: printed,
                    value_analytic: analytic,
                }),
                None => curves.skipped.push((label.clone(), p_c)),
            }
        }
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn label(c: usize, n: usize) -> OneHotLabel {
        OneHotLabel::new(c, n).unwrap()
    }

    #[test]
    fn softmax_symmetric_inputs() {
        assert_eq!(softmax(&lv(&[0.0, 0.0])).as_slice(), &[0.5, 0.5]);
        assert_eq!(softmax(&lv(&[1.0; 4])).as_slice(), &[0.25; 4]);
    }

    #[test]
    fn softmax_large_gap_does_not_overflow() {
        let p = softmax(&lv(&[1000.0, 0.0]));
        assert_eq!(p.as_slice()[0], 1.0);
        assert!(p.as_slice()[1] >= 0.0 && p.as_slice()[1] < 1e-300);
        let lp = log_softmax(&lv(&[1000.0, 0.0]));
        assert!(lp[0].abs() < 1e-300);
        assert_abs_diff_eq!(lp[1], -1000.0, epsilon = 1e-12);
    }

    #[test]
    fn log_softmax_uniform() {
        let lp = log_softmax(&lv(&[0.0, 0.0]));
        assert_abs_diff_eq!(lp[0], -std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(lp[1], -std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_logits() {
        assert!(LogitVector::new(vec![1.0]).is_err());
        assert!(LogitVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(OneHotLabel::new(3, 3).is_err());
    }

    #[test]
    fn cel_of_uniform_pair_is_ln2() {
        let v = loss_forward(&LossSpec::cel(), &lv(&[0.0, 0.0]), &label(0, 2)).unwrap();
        assert_abs_diff_eq!(v, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn nllr_vanishes_at_half() {
        let v = loss_forward(&LossSpec::nllr(), &lv(&[0.3, 0.3]), &label(1, 2)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn crl_at_half() {
        // ln(2) - ln(0.5), evaluated at 40 digits
        let v = loss_forward(&LossSpec::crl(1.5, 1.0), &lv(&[0.0, 0.0]), &label(0, 2)).unwrap();
        assert_abs_diff_eq!(v, 1.386_294_361_119_890_6, epsilon = 1e-15);
    }

    #[test]
    fn bce_requires_two_classes() {
        let err = loss_forward(&LossSpec::bce(), &lv(&[0.0, 1.0, 2.0]), &label(0, 3));
        assert!(matches!(err, Err(Error::Config(_))));
        let v = loss_forward(&LossSpec::bce(), &lv(&[0.2, -0.4]), &label(1, 2)).unwrap();
        let cel = loss_forward(&LossSpec::cel(), &lv(&[0.2, -0.4]), &label(1, 2)).unwrap();
        assert_abs_diff_eq!(v, cel, epsilon = 1e-15);
    }

    #[test]
    fn cel_gradient_examples() {
        // logits ln[0.7, 0.2, 0.1]; expected values from central differences
        let x = lv(&[0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]);
        let g = loss_backward(&LossSpec::cel(), &x, &label(0, 3)).unwrap();
        for (a, b) in g.as_slice().iter().zip([-0.3, 0.2, 0.1]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let g = loss_backward(&LossSpec::cel(), &lv(&[0.0, 0.0]), &label(0, 2)).unwrap();
        assert_eq!(g.as_slice(), &[-0.5, 0.5]);
    }

    #[test]
    fn crl_beta_zero_gradient_is_cel() {
        let x = lv(&[0.4, -1.2, 2.2, 0.0]);
        let a = loss_backward(&LossSpec::crl(1.5, 0.0), &x, &label(2, 4)).unwrap();
        let b = loss_backward(&LossSpec::cel(), &x, &label(2, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn finite_diff_matches_symmetry_and_rejects_zero_step() {
        let g = finite_diff_grad(&LossSpec::cel(), &lv(&[0.0, 0.0]), &label(0, 2), 1e-5).unwrap();
        assert_abs_diff_eq!(g.as_slice()[0], -0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(g.as_slice()[1], 0.5, epsilon = 1e-8);
        assert!(finite_diff_grad(&LossSpec::cel(), &lv(&[0.0, 0.0]), &label(0, 2), 0.0).is_err());
    }

    #[test]
    fn printed_crl_backward_differs_from_analytic() {
        let x = lv(&[0.0, 0.0]);
        let a = loss_backward(&LossSpec::crl(1.5, 1.0), &x, &label(0, 2)).unwrap();
        let p = printed_crl_backward(&LossSpec::crl(1.5, 1.0), &x, &label(0, 2)).unwrap();
        // multipliers 1.25 and 0.75 on p_j = 0.5
        assert_abs_diff_eq!(a.as_slice()[1], 0.625, epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[1], 0.375, epsilon = 1e-15);
    }

    #[test]
    fn cce_extreme_competitor_stays_finite() {
        let x = lv(&[0.0, 800.0, -5.0]);
        let v = loss_forward(&LossSpec::cce(), &x, &label(0, 3)).unwrap();
        assert!(v.is_finite());
        let g = loss_backward(&LossSpec::cce(), &x, &label(0, 3)).unwrap();
        assert!(g.as_slice().iter().all(|v| v.is_finite()));
        let v = loss_forward(&LossSpec::nllr(), &lv(&[900.0, 0.0]), &label(0, 2)).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn batch_reduction() {
        let rows = vec![lv(&[0.1, 0.5, -0.3]), lv(&[1.0, -2.0, 0.0])];
        let labels = vec![label(1, 3), label(0, 3)];
        let spec = LossSpec::crl(1.5, 1.0);
        let (single, g1) = batch_loss(&spec, &rows[..1], &labels[..1]).unwrap();
        assert_eq!(single, loss_forward(&spec, &rows[0], &labels[0]).unwrap());
        assert_eq!(g1[0], loss_backward(&spec, &rows[0], &labels[0]).unwrap());

        let dup = vec![rows[0].clone(), rows[0].clone()];
        let (m, _) = batch_loss(&spec, &dup, &[labels[0], labels[0]]).unwrap();
        assert_abs_diff_eq!(m, single, epsilon = 1e-15);

        let (mean, grads) = batch_loss(&spec, &rows, &labels).unwrap();
        let brute: f64 = rows
            .iter()
            .zip(&labels)
            .map(|(r, l)| loss_forward(&spec, r, l).unwrap())
            .sum::<f64>()
            / 2.0;
        assert_abs_diff_eq!(mean, brute, epsilon = 1e-15);
        let g0 = loss_backward(&spec, &rows[1], &labels[1]).unwrap();
        for (a, b) in grads[1].as_slice().iter().zip(g0.as_slice()) {
            assert_abs_diff_eq!(*a, b / 2.0, epsilon = 1e-15);
        }

        assert!(batch_loss(&spec, &[], &[]).is_err());
        let mixed = vec![lv(&[0.0, 1.0]), lv(&[0.0, 1.0, 2.0])];
        assert!(batch_loss(&spec, &mixed, &[label(0, 2), label(0, 3)]).is_err());
    }

    #[test]
    fn curve_values() {
        let specs = [LossSpec::cel(), LossSpec::nllr(), LossSpec::crl(1.5, 1.0)];
        let curves = gradient_curve(&specs, &[0.25, 0.5, 0.75, 1.0], 0.5).unwrap();
        let get = |name: &str, p: f64| {
            curves
                .samples
                .iter()
                .find(|s| s.loss_label == name && s.p_c == p)
                .cloned()
        };
        assert_eq!(get("cel", 0.75).unwrap().value_printed, 0.5);
        assert_eq!(get("nllr", 0.5).unwrap().value_printed, 0.0);
        assert!(get("nllr", 0.75).unwrap().value_printed < 0.0);
        assert!(get("nllr", 1.0).is_none());
        assert_eq!(curves.skipped, vec![("nllr".to_string(), 1.0)]);
        assert_abs_diff_eq!(get("crl", 0.5).unwrap().value_printed, 0.375, epsilon = 1e-12);
        assert!(gradient_curve(&specs, &[0.0], 0.5).is_err());
        assert!(gradient_curve(&[LossSpec::cce()], &[0.5], 0.5).is_err());
    }

    #[test]
    fn parse_specs() {
        assert_eq!(LossSpec::parse("cel").unwrap(), LossSpec::cel());
        assert_eq!(LossSpec::parse("crl").unwrap(), LossSpec::crl(1.5, 1.0));
        assert_eq!(LossSpec::parse("crl:2:0.5").unwrap(), LossSpec::crl(2.0, 0.5));
        assert!(LossSpec::parse("focal").is_err());
        assert!(LossSpec::parse("crl:-1:1").is_err());
    }
}
