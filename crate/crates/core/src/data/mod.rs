//! Datasets: IDX and CIFAR-10 binary readers, synthetic generators,
//! normalization, and augmentation.

mod augment;
mod cifar;
mod idx;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentSpec};
pub use cifar::{encode_cifar10_record, load_cifar10_bin, CIFAR10_RECORD_LEN};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{make_blobs, make_ordinal, ORDINAL_FEATURES};

/// Inputs `[N, ...]` with one class index per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("batch has no samples".into()));
        }
        if inputs.shape().len() < 2 || inputs.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "inputs {:?} for {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledBatch {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn select(&self, idx: &[usize]) -> LabeledBatch {
        LabeledBatch {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// First `n` samples (or all of them).
    pub fn truncate(self, n: usize) -> LabeledBatch {
        if n >= self.len() {
            return self;
        }
        let idx: Vec<usize> = (0..n).collect();
        self.select(&idx)
    }
}

/// Per-channel mean and standard deviation. Axis 1 is the channel axis:
/// `[N, C, H, W]` has C channels, `[N, D]` treats each feature as one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let channels = shape.get(1).copied().unwrap_or(1);
    let inner: usize = shape.iter().skip(2).product();
    (n, channels, inner)
}

pub fn compute_stats(batch: &LabeledBatch) -> NormStats {
    let (n, channels, inner) = channel_layout(batch.inputs.shape());
    let data = batch.inputs.data();
    let count = (n * inner) as f64;
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for c in 0..channels {
        let values = (0..n).flat_map(|i| {
            let start = (i * channels + c) * inner;
            data[start..start + inner].iter().copied()
        });
        let m = values.clone().sum::<f64>() / count;
        let var = values.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        mean[c] = m;
        std[c] = var.sqrt();
    }
    NormStats { mean, std }
}

/// `(x - mean) / max(std, 1e-8)` per channel.
pub fn normalize(batch: &LabeledBatch, stats: &NormStats) -> Result<LabeledBatch> {
    let (_, channels, inner) = channel_layout(batch.inputs.shape());
    if stats.mean.len() != channels || stats.std.len() != channels {
        return Err(Error::Shape(format!(
            "stats for {} channels applied to {channels}",
            stats.mean.len()
        )));
    }
    let mut out = batch.clone();
    for (k, v) in out.inputs.data_mut().iter_mut().enumerate() {
        let c = (k / inner) % channels;
        *v = (*v - stats.mean[c]) / stats.std[c].max(STD_FLOOR);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub class_count: usize,
    pub input_shape: Vec<usize>,
    pub norm_stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(train: LabeledBatch, test: LabeledBatch) -> Result<Self> {
        if train.sample_shape() != test.sample_shape() || train.class_count != test.class_count {
            return Err(Error::Consistency(format!(
                "train {:?}/{} classes vs test {:?}/{} classes",
                train.sample_shape(),
                train.class_count,
                test.sample_shape(),
                test.class_count
            )));
        }
        Ok(Dataset {
            class_count: train.class_count,
            input_shape: train.sample_shape().to_vec(),
            train,
            test,
            norm_stats: None,
        })
    }

    /// Normalizes both splits with statistics of the train split.
    pub fn normalized(self) -> Result<Self> {
        let stats = compute_stats(&self.train);
        Ok(Dataset {
            train: normalize(&self.train, &stats)?,
            test: normalize(&self.test, &stats)?,
            norm_stats: Some(stats),
            ..self
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(shape: Vec<usize>, data: Vec<f64>) -> LabeledBatch {
        let n = shape[0];
        LabeledBatch::new(Tensor::new(shape, data).unwrap(), vec![0; n], 2).unwrap()
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let t = Tensor::zeros(vec![2, 3]);
        assert!(LabeledBatch::new(t.clone(), vec![0, 2], 2).is_err());
        assert!(LabeledBatch::new(t, vec![0], 2).is_err());
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let b = batch(vec![3, 1, 2, 2], vec![0.5; 12]);
        let stats = compute_stats(&b);
        assert_eq!(stats.std, vec![0.0]);
        let n = normalize(&b, &stats).unwrap();
        assert!(n.inputs().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_train_is_standard() {
        let data: Vec<f64> = (0..2 * 5 * 2 * 3).map(|v| ((v * 37) % 11) as f64 * 0.3 + 1.0).collect();
        let b = batch(vec![5, 2, 2, 3], data);
        let n = normalize(&b, &compute_stats(&b)).unwrap();
        let s = compute_stats(&n);
        for c in 0..2 {
            assert!(s.mean[c].abs() < 1e-6);
            assert!((s.std[c] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn test_split_uses_train_stats() {
        let train = batch(vec![2, 2], vec![0.0, 10.0, 2.0, 30.0]);
        let test = batch(vec![1, 2], vec![1.0, 20.0]);
        let ds = Dataset::new(train, test).unwrap().normalized().unwrap();
        // train means are 1 and 20, so the test sample lands exactly on zero.
        assert_eq!(ds.test.inputs().data(), &[0.0, 0.0]);
        assert_eq!(ds.norm_stats.unwrap().mean, vec![1.0, 20.0]);
    }
}
