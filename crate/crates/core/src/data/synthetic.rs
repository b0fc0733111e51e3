use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature width of [`make_ordinal`] samples.
pub const ORDINAL_FEATURES: usize = 4;

/// Class centre on a scaled cross-polytope: class `c` sits on axis
/// `(c / 2) % dim`, positive for even `c`, and classes beyond `2 * dim`
/// move further out along the same rays.
fn blob_center(class: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut center = vec![0.0; dim];
    let axis = (class / 2) % dim;
    let shell = 1 + class / (2 * dim);
    let sign = if class % 2 == 0 { 1.0 } else { -1.0 };
    center[axis] = sign * separation * shell as f64;
    center
}

/// Shuffles samples with `rng` and splits them 80/20 into train and test.
fn split(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = (n * 4).div_ceil(5).min(n - 1);
    let dim = features[0].len();
    let build = |idx: &[usize]| -> Result<LabeledBatch> {
        let data = idx.iter().flat_map(|&i| features[i].iter().copied()).collect();
        LabeledBatch::new(
            Tensor::new(vec![idx.len(), dim], data)?,
            idx.iter().map(|&i| labels[i]).collect(),
            classes,
        )
    };
    Dataset::new(build(&order[..n_train])?, build(&order[n_train..])?)
}

/// Gaussian clusters with unit variance around [`blob_center`]s.
pub fn make_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || per_class == 0 {
        return Err(Error::Config(format!(
            "blobs need >= 2 classes, dim >= 1 and samples per class (got {classes}, {dim}, {per_class})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let center = blob_center(c, dim, separation);
        for _ in 0..per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|m| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m + noise
                })
                .collect();
            features.push(x);
            labels.push(c);
        }
    }
    split(features, labels, classes, &mut rng)
}

/// Ordinal classes from a 1-D latent value. Class `c` draws its latent
/// uniformly from `[c - overlap/2, c + 1 + overlap/2)`, so neighbours share
/// an interval of width `overlap`. Features are the latent mapped to
/// `[-1, 1]`, its square, and two standard-normal nuisance values.
pub fn make_ordinal(classes: usize, per_class: usize, overlap: f64, seed: u64) -> Result<Dataset> {
    if classes < 3 || per_class == 0 {
        return Err(Error::Config(format!(
            "ordinal data needs >= 3 classes and samples per class (got {classes}, {per_class})"
        )));
    }
    if !(overlap.is_finite() && overlap >= 0.0) {
        return Err(Error::Config(format!("overlap must be >= 0, got {overlap}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let lo = c as f64 - overlap / 2.0;
        let hi = c as f64 + 1.0 + overlap / 2.0;
        for _ in 0..per_class {
            let z: f64 = rng.random_range(lo..hi);
            let u = 2.0 * z / classes as f64 - 1.0;
            features.push(vec![
                u,
                u * u,
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ]);
            labels.push(c);
        }
    }
    split(features, labels, classes, &mut rng)
}
