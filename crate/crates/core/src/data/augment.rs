use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabeledBatch;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// `(pad, crop)`: zero-pad every side by `pad`, then crop a random
    /// `crop x crop` window. `crop` must equal the image side.
    #[serde(default)]
    pub pad_crop: Option<(usize, usize)>,
    #[serde(default)]
    pub hflip_prob: f64,
}

/// Random horizontal flips and pad-then-crop shifts on `[N, C, H, W]` images.
/// Each image draws its flip first, then its crop offsets.
pub fn augment<R: Rng>(batch: &LabeledBatch, spec: &AugmentSpec, rng: &mut R) -> Result<LabeledBatch> {
    if !(0.0..=1.0).contains(&spec.hflip_prob) {
        return Err(Error::Config(format!("hflip_prob {} outside [0,1]", spec.hflip_prob)));
    }
    let &[_, channels, h, w] = batch.inputs().shape() else {
        return Err(Error::Shape(format!(
            "augmentation needs [N,C,H,W] images, got {:?}",
            batch.inputs().shape()
        )));
    };
    if let Some((_, crop)) = spec.pad_crop {
        if crop != h || crop != w {
            return Err(Error::Config(format!(
                "crop {crop} must equal the {h}x{w} image side"
            )));
        }
    }
    let mut out = batch.clone();
    let plane = h * w;
    let mut scratch = vec![0.0; channels * plane];
    for img in out.inputs.data_mut().chunks_mut(channels * plane) {
        if spec.hflip_prob > 0.0 && rng.random::<f64>() < spec.hflip_prob {
            hflip(img, w);
        }
        if let Some((pad, _)) = spec.pad_crop {
            let dy = rng.random_range(0..=2 * pad);
            let dx = rng.random_range(0..=2 * pad);
            scratch.copy_from_slice(img);
            for c in 0..channels {
                for y in 0..h {
                    for x in 0..w {
                        // padded coordinate (y + dy, x + dx) in source pixels
                        let sy = (y + dy).checked_sub(pad).filter(|&v| v < h);
                        let sx = (x + dx).checked_sub(pad).filter(|&v| v < w);
                        img[c * plane + y * w + x] = match (sy, sx) {
                            (Some(sy), Some(sx)) => scratch[c * plane + sy * w + sx],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
    Ok(out)
}

fn hflip(img: &mut [f64], w: usize) {
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize, c: usize, side: usize) -> LabeledBatch {
        let len = n * c * side * side;
        let t = Tensor::new(vec![n, c, side, side], (0..len).map(|v| v as f64 + 1.0).collect()).unwrap();
        LabeledBatch::new(t, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn identity_spec_changes_nothing() {
        let b = ramp(3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&b, &AugmentSpec::default(), &mut rng).unwrap(), b);
    }

    #[test]
    fn double_flip_is_identity() {
        let b = ramp(2, 3, 5);
        let spec = AugmentSpec {
            pad_crop: None,
            hflip_prob: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&b, &spec, &mut rng).unwrap();
        assert_ne!(once, b);
        assert_eq!(once.inputs().data()[0], 5.0);
        assert_eq!(augment(&once, &spec, &mut rng).unwrap(), b);
    }

    #[test]
    fn crop_is_a_shifted_window_of_the_padded_image() {
        let side = 32;
        let b = ramp(4, 1, side);
        let spec = AugmentSpec {
            pad_crop: Some((4, 32)),
            hflip_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = augment(&b, &spec, &mut rng).unwrap();
        assert_eq!(out.inputs().shape(), b.inputs().shape());
        assert_eq!(out.labels(), b.labels());
        for i in 0..4 {
            let src = b.inputs().row(i);
            let dst = out.inputs().row(i);
            // Pixel-coordinate oracle: some offset in [-4, 4]^2 must explain
            // every output pixel, with zeros outside the source.
            let found = (-4i64..=4).any(|oy| {
                (-4i64..=4).any(|ox| {
                    (0..side).all(|y| {
                        (0..side).all(|x| {
                            let (sy, sx) = (y as i64 + oy, x as i64 + ox);
                            let expect = if (0..side as i64).contains(&sy) && (0..side as i64).contains(&sx) {
                                src[sy as usize * side + sx as usize]
                            } else {
                                0.0
                            };
                            dst[y * side + x] == expect
                        })
                    })
                })
            });
            assert!(found, "image {i} is not a shifted window");
        }
    }

    #[test]
    fn invalid_geometry() {
        let b = ramp(1, 1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = AugmentSpec {
            pad_crop: Some((2, 10)),
            hflip_prob: 0.0,
        };
        assert!(augment(&b, &spec, &mut rng).is_err());
    }
}
