//! Finite-difference validation of every loss backward and every layer kind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::losses::{
    batch_loss_rows, finite_diff_grad, loss_backward, printed_crl_backward, GradientVector,
    LogitVector, LossKind, LossSpec, OneHotLabel,
};
use crate::models::{build_model, Architecture, LayerSpec, Model};
use crate::tensor::Tensor;

pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const CLASS_COUNTS: [usize; 4] = [2, 3, 10, 100];

/// `|a - b| / max(|a|, |b|)` over whole vectors (Euclidean norms).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Which backward implementation the loss suite checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardSource {
    Analytic,
    /// Substitutes the printed CRL multiplier; must fail the check.
    PrintedCrl,
}

#[derive(Clone, Debug)]
pub struct FailedCase {
    pub spec: LossSpec,
    pub logits: Vec<f64>,
    pub label: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub name: String,
    pub cases: usize,
    pub worst_rel_error: f64,
    pub threshold: f64,
    pub failures: Vec<FailedCase>,
    pub failure_count: usize,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.failure_count == 0 && self.worst_rel_error < self.threshold
    }
}

const KEPT_FAILURES: usize = 5;

/// Random logits uniform in [-3, 3]. CRL hyperparameters are drawn from
/// alpha in [0, 3] and beta in [0, 2].
pub fn loss_suite(
    kinds: &[LossKind],
    cases: usize,
    seed: u64,
    source: BackwardSource,
) -> Result<Vec<ComponentReport>> {
    let mut reports = Vec::new();
    for (ki, &kind) in kinds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ki as u64 + 1);
        let mut report = ComponentReport {
            name: format!("loss/{kind}"),
            cases,
            worst_rel_error: 0.0,
            threshold: LOSS_TOLERANCE,
            failures: Vec::new(),
            failure_count: 0,
        };
        for case in 0..cases {
            let classes = if kind == LossKind::Bce {
                2
            } else {
                CLASS_COUNTS[case % CLASS_COUNTS.len()]
            };
            let spec = match kind {
                LossKind::Crl => LossSpec::crl(rng.random_range(0.0..3.0), rng.random_range(0.0..2.0)),
                k => LossSpec {
                    kind: k,
                    alpha: 0.0,
                    beta: 0.0,
                },
            };
            let values: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..classes);
            let logits = LogitVector::new(values)?;
            let onehot = OneHotLabel::new(label, classes)?;
            let analytic: GradientVector = match (source, kind) {
                (BackwardSource::PrintedCrl, LossKind::Crl) => {
                    printed_crl_backward(&spec, &logits, &onehot)?
                }
                _ => loss_backward(&spec, &logits, &onehot)?,
            };
            let numeric = finite_diff_grad(&spec, &logits, &onehot, FD_STEP)?;
            let err = relative_error(analytic.as_slice(), numeric.as_slice());
            let err = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_rel_error = report.worst_rel_error.max(err);
            if err >= LOSS_TOLERANCE {
                report.failure_count += 1;
                if report.failures.len() < KEPT_FAILURES {
                    report.failures.push(FailedCase {
                        spec,
                        logits: logits.into_inner(),
                        label,
                        rel_error: err,
                    });
                }
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Loss of a freshly cloned model on `(x, labels)`, so dropout masks match
/// the ones drawn by the reference forward.
fn model_loss(base: &Model, x: &Tensor, labels: &[usize], spec: &LossSpec) -> Result<f64> {
    let mut m = base.clone();
    let logits = m.forward(x)?;
    let mut scratch = vec![0.0; logits.len()];
    batch_loss_rows(spec, logits.data(), m.class_count(), labels, &mut scratch)
}

/// Analytic versus central-difference gradients for every parameter tensor
/// and the input. Returns the worst relative error.
pub fn check_model(base: &Model, x: &Tensor, labels: &[usize], spec: &LossSpec) -> Result<f64> {
    let mut m = base.clone();
    m.zero_grad();
    let logits = m.forward(x)?;
    let mut dlogits = vec![0.0; logits.len()];
    batch_loss_rows(spec, logits.data(), m.class_count(), labels, &mut dlogits)?;
    let dx = m.backward(&Tensor::new(logits.shape().to_vec(), dlogits)?)?;

    let mut worst: f64 = 0.0;
    let param_count = base.parameters().len();
    for t in 0..param_count {
        let len = base.parameters()[t].len();
        let mut numeric = Vec::with_capacity(len);
        for e in 0..len {
            let mut probe = base.clone();
            let orig = probe.parameters()[t].data()[e];
            probe.parameters_mut()[t].data_mut()[e] = orig + FD_STEP;
            let up = model_loss(&probe, x, labels, spec)?;
            probe.parameters_mut()[t].data_mut()[e] = orig - FD_STEP;
            let down = model_loss(&probe, x, labels, spec)?;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(m.gradients()[t].data(), &numeric));
    }

    let mut probe_x = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for e in 0..x.len() {
        let orig = probe_x.data()[e];
        probe_x.data_mut()[e] = orig + FD_STEP;
        let up = model_loss(base, &probe_x, labels, spec)?;
        probe_x.data_mut()[e] = orig - FD_STEP;
        let down = model_loss(base, &probe_x, labels, spec)?;
        probe_x.data_mut()[e] = orig;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    worst = worst.max(relative_error(dx.data(), &numeric));
    Ok(if worst.is_nan() { f64::INFINITY } else { worst })
}

pub const LAYER_KINDS: [&str; 6] = ["linear", "conv2d", "maxpool2d", "relu", "dropout", "flatten"];

/// Small randomized network exercising one layer kind, with its input.
fn layer_case(kind: &str, rng: &mut ChaCha8Rng) -> Result<(Model, Tensor, Vec<usize>)> {
    let classes = rng.random_range(2..5);
    let batch = rng.random_range(1..4);
    let (input_shape, mut layers): (Vec<usize>, Vec<LayerSpec>) = match kind {
        "linear" => {
            let d = rng.random_range(2..7);
            (vec![d], vec![])
        }
        "conv2d" => {
            let cin = rng.random_range(1..3);
            let kernel = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let padding = rng.random_range(0..2);
            let side = rng.random_range(kernel.max(3)..6);
            (
                vec![cin, side, side],
                vec![
                    LayerSpec::Conv2d {
                        in_channels: cin,
                        out_channels: rng.random_range(1..4),
                        kernel,
                        stride,
                        padding,
                    },
                    LayerSpec::Flatten,
                ],
            )
        }
        "maxpool2d" => {
            let kernel = rng.random_range(1..4);
            let side = rng.random_range(kernel.max(2)..6);
            (
                vec![rng.random_range(1..3), side, side],
                vec![
                    LayerSpec::MaxPool2d {
                        kernel,
                        stride: rng.random_range(1..3),
                    },
                    LayerSpec::Flatten,
                ],
            )
        }
        "relu" => {
            let d = rng.random_range(2..7);
            let hidden = rng.random_range(2..7);
            (
                vec![d],
                vec![LayerSpec::Linear { input: d, output: hidden }, LayerSpec::Relu],
            )
        }
        "dropout" => {
            let d = rng.random_range(2..7);
            (vec![d], vec![LayerSpec::Dropout { rate: rng.random_range(0.0..0.7) }])
        }
        "flatten" => (
            vec![rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4)],
            vec![LayerSpec::Flatten],
        ),
        other => {
            return Err(crate::Error::Config(format!("unknown layer kind '{other}'")));
        }
    };
    let mut shape = input_shape.clone();
    for l in &layers {
        shape = l.output_shape(&shape)?;
    }
    layers.push(LayerSpec::Linear {
        input: shape[0],
        output: classes,
    });
    let seed = rng.random();
    let model = build_model(&Architecture::Layers(layers), &input_shape, classes, seed)?;
    let mut full = vec![batch];
    full.extend_from_slice(&input_shape);
    let len = full.iter().product();
    let data: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Ok((model, Tensor::new(full, data)?, labels))
}

pub fn layer_suite(cases: usize, seed: u64) -> Result<Vec<ComponentReport>> {
    let spec = LossSpec::crl(1.5, 1.0);
    let mut reports = Vec::new();
    for (ki, kind) in LAYER_KINDS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(100 + ki as u64);
        let mut report = ComponentReport {
            name: format!("layer/{kind}"),
            cases,
            worst_rel_error: 0.0,
            threshold: LAYER_TOLERANCE,
            failures: Vec::new(),
            failure_count: 0,
        };
        for _ in 0..cases {
            let (model, x, labels) = layer_case(kind, &mut rng)?;
            let err = check_model(&model, &x, &labels, &spec)?;
            report.worst_rel_error = report.worst_rel_error.max(err);
            if err >= LAYER_TOLERANCE {
                report.failure_count += 1;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_passes_and_printed_fails() {
        let ok = loss_suite(&LossKind::ALL, 40, 7, BackwardSource::Analytic).unwrap();
        assert!(ok.iter().all(ComponentReport::passed), "{ok:?}");
        let bad = loss_suite(&[LossKind::Crl], 40, 7, BackwardSource::PrintedCrl).unwrap();
        assert!(!bad[0].passed());
        assert!(bad[0].worst_rel_error > 0.1);
    }

    #[test]
    fn layers_pass() {
        let reports = layer_suite(4, 3).unwrap();
        assert!(reports.iter().all(ComponentReport::passed), "{reports:?}");
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.5]) - 0.5).abs() < 1e-15);
    }
}
