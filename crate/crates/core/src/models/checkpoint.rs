//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "CRLM"
//! version      u8       currently 1
//! seed         u64
//! class_count  u64
//! input_rank   u32, then input_rank x u64 dims
//! layer_count  u32, then per layer:
//!     tag u8   0 linear    input u64, output u64
//!              1 conv2d    in u64, out u64, kernel u64, stride u64, padding u64
//!              2 maxpool2d kernel u64, stride u64
//!              3 relu
//!              4 dropout   rate f64
//!              5 flatten
//! param_count  u32, then per parameter tensor in layer order (weight, bias):
//!     len u64, then len x f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{LayerSpec, Model};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CRLM";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_model(model: &Model, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_u8(CHECKPOINT_VERSION)?;
    w.write_u64::<LittleEndian>(model.seed())?;
    w.write_u64::<LittleEndian>(model.class_count() as u64)?;
    w.write_u32::<LittleEndian>(model.input_shape().len() as u32)?;
    for &d in model.input_shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    let specs = model.layer_specs();
    w.write_u32::<LittleEndian>(specs.len() as u32)?;
    for spec in &specs {
        match *spec {
            LayerSpec::Linear { input, output } => {
                w.write_u8(0)?;
                w.write_u64::<LittleEndian>(input as u64)?;
                w.write_u64::<LittleEndian>(output as u64)?;
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                w.write_u8(1)?;
                for v in [in_channels, out_channels, kernel, stride, padding] {
                    w.write_u64::<LittleEndian>(v as u64)?;
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                w.write_u8(2)?;
                w.write_u64::<LittleEndian>(kernel as u64)?;
                w.write_u64::<LittleEndian>(stride as u64)?;
            }
            LayerSpec::Relu => w.write_u8(3)?,
            LayerSpec::Dropout { rate } => {
                w.write_u8(4)?;
                w.write_f64::<LittleEndian>(rate)?;
            }
            LayerSpec::Flatten => w.write_u8(5)?,
        }
    }
    let params = model.parameters();
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for p in params {
        w.write_u64::<LittleEndian>(p.len() as u64)?;
        for &v in p.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let format = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Length {
                path: path.to_path_buf(),
                msg: "checkpoint ends early".into(),
            }
        } else {
            Error::io(path, e)
        }
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u8().map_err(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(format(format!("unsupported checkpoint version {version}")));
    }
    let read_usize = |r: &mut BufReader<File>| -> Result<usize> {
        let v = r.read_u64::<LittleEndian>().map_err(truncated)?;
        usize::try_from(v).map_err(|_| format(format!("value {v} does not fit usize")))
    };
    let seed = r.read_u64::<LittleEndian>().map_err(truncated)?;
    let class_count = read_usize(&mut r)?;
    let rank = r.read_u32::<LittleEndian>().map_err(truncated)?;
    let input_shape = (0..rank)
        .map(|_| read_usize(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let layer_count = r.read_u32::<LittleEndian>().map_err(truncated)?;
    let mut specs = Vec::with_capacity(layer_count as usize);
    for _ in 0..layer_count {
        let tag = r.read_u8().map_err(truncated)?;
        let spec = match tag {
            0 => LayerSpec::Linear {
                input: read_usize(&mut r)?,
                output: read_usize(&mut r)?,
            },
            1 => LayerSpec::Conv2d {
                in_channels: read_usize(&mut r)?,
                out_channels: read_usize(&mut r)?,
                kernel: read_usize(&mut r)?,
                stride: read_usize(&mut r)?,
                padding: read_usize(&mut r)?,
            },
            2 => LayerSpec::MaxPool2d {
                kernel: read_usize(&mut r)?,
                stride: read_usize(&mut r)?,
            },
            3 => LayerSpec::Relu,
            4 => LayerSpec::Dropout {
                rate: r.read_f64::<LittleEndian>().map_err(truncated)?,
            },
            5 => LayerSpec::Flatten,
            t => return Err(format(format!("unknown layer tag {t}"))),
        };
        specs.push(spec);
    }
    let mut model = Model::from_layers(&specs, &input_shape, class_count, seed)?;
    let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut params = model.parameters_mut();
    if count != params.len() {
        return Err(format(format!(
            "{count} parameter tensors stored, architecture has {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let len = read_usize(&mut r)?;
        if len != p.len() {
            return Err(format(format!(
                "parameter of length {len} where {} expected",
                p.len()
            )));
        }
        r.read_f64_into::<LittleEndian>(p.data_mut()).map_err(truncated)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(format(format!("{} trailing bytes", rest.len())));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Architecture, Preset};

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        for (preset, shape) in [
            (Preset::Logreg, vec![1, 4, 4]),
            (Preset::Mlp, vec![7]),
            (Preset::ShallowCnn, vec![1, 8, 8]),
        ] {
            let m = build_model(&Architecture::Preset(preset), &shape, 3, 42).unwrap();
            save_checkpoint(&m, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back.layer_specs(), m.layer_specs());
            assert_eq!(back.input_shape(), m.input_shape());
            let bits = |m: &Model| -> Vec<u64> {
                m.parameters()
                    .iter()
                    .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                    .collect()
            };
            assert_eq!(bits(&back), bits(&m));
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build_model(&Architecture::Preset(Preset::Logreg), &[3], 2, 0).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Length { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        let mut bad = bytes;
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
