//! IDX containers (the MNIST distribution format). Headers are big-endian:
//! a 4-byte magic, then one u32 per dimension, then raw `u8` payload.
//! Gzipped files are decompressed transparently.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;

use super::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Validates the header and returns `(dims, payload)`.
fn parse<'a>(path: &Path, bytes: &'a [u8], magic: u32, rank: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let header = 4 + 4 * rank;
    if bytes.len() < 4 {
        return Err(Error::Length {
            path: path.to_path_buf(),
            msg: format!("{} bytes, too short for an IDX magic", bytes.len()),
        });
    }
    let observed = BigEndian::read_u32(&bytes[..4]);
    if observed != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("magic 0x{observed:08x}, expected 0x{magic:08x}"),
        });
    }
    if bytes.len() < header {
        return Err(Error::Length {
            path: path.to_path_buf(),
            msg: format!("{} bytes, header needs {header}", bytes.len()),
        });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize)
        .collect();
    let need: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < need {
        return Err(Error::Length {
            path: path.to_path_buf(),
            msg: format!("payload has {} bytes, dims {dims:?} need {need}", payload.len()),
        });
    }
    Ok((dims, &payload[..need]))
}

/// Reads an image/label IDX pair into `[N, 1, rows, cols]` pixels in [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path, class_count: usize) -> Result<LabeledBatch> {
    let image_bytes = read_bytes(images_path)?;
    let label_bytes = read_bytes(labels_path)?;
    let (dims, pixels) = parse(images_path, &image_bytes, IDX_IMAGES_MAGIC, 3)?;
    let (label_dims, labels) = parse(labels_path, &label_bytes, IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if n != label_dims[0] {
        return Err(Error::Consistency(format!(
            "{n} images in {images_path:?} but {} labels in {labels_path:?}",
            label_dims[0]
        )));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Length {
            path: images_path.to_path_buf(),
            msg: format!("empty image set {dims:?}"),
        });
    }
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    LabeledBatch::new(inputs, labels.iter().map(|&l| l as usize).collect(), class_count)
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = vec![0u8; 16];
    BigEndian::write_u32(&mut out[0..4], IDX_IMAGES_MAGIC);
    BigEndian::write_u32(&mut out[4..8], n as u32);
    BigEndian::write_u32(&mut out[8..12], rows as u32);
    BigEndian::write_u32(&mut out[12..16], cols as u32);
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 8];
    BigEndian::write_u32(&mut out[0..4], IDX_LABELS_MAGIC);
    BigEndian::write_u32(&mut out[4..8], labels.len() as u32);
    out.extend_from_slice(labels);
    out
}
