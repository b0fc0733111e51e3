//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green, and 1024 blue pixels (row-major 32x32 planes).

use std::path::Path;

use super::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD_LEN: usize = 3073;
const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;

/// Loads records from each file in order, stopping after `limit` records
/// when given.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P], limit: Option<usize>) -> Result<LabeledBatch> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    'files: for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR10_RECORD_LEN != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "{} bytes is not a whole number of {CIFAR10_RECORD_LEN}-byte records",
                    bytes.len()
                ),
            });
        }
        for record in bytes.chunks_exact(CIFAR10_RECORD_LEN) {
            if limit.is_some_and(|k| labels.len() >= k) {
                break 'files;
            }
            let label = record[0] as usize;
            if label >= 10 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("label byte {label} outside 0..10"),
                });
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("no CIFAR-10 records loaded".into()));
    }
    let inputs = Tensor::new(vec![labels.len(), 3, SIDE, SIDE], data)?;
    LabeledBatch::new(inputs, labels, 10)
}

/// One record in the on-disk layout; `pixels` are channel-planar RGB.
pub fn encode_cifar10_record(label: u8, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), PIXELS, "a CIFAR-10 record holds 3072 pixels");
    let mut out = Vec::with_capacity(CIFAR10_RECORD_LEN);
    out.push(label);
    out.extend_from_slice(pixels);
    out
}
