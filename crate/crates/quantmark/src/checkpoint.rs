//! QMK1 checkpoint container: named tensors, bit-exact across platforms.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! "QMK1" | record count | records...
//! record: name length | name (UTF-8) | dtype (u8: 0=f32, 1=i8+scales)
//!         | rank | dims... | payload
//! f32 payload: values as LE f32
//! i8 payload:  values as i8, followed by rows LE f32 scales
//! ```
//!
//! Model checkpoints store every parameter as an f32 record and carry the
//! model config in a JSON sidecar at `<path>.json`. Quantized exports store
//! quantizable weights as i8 records and everything else as f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, Mode};
use crate::quant::QuantizedMatrix;

pub const MAGIC: &[u8; 4] = b"QMK1";

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorRecord {
    F32 {
        name: String,
        shape: Vec<usize>,
        values: Vec<f32>,
    },
    I8 {
        name: String,
        shape: Vec<usize>,
        values: Vec<i8>,
        scales: Vec<f32>,
    },
}

impl TensorRecord {
    pub fn name(&self) -> &str {
        match self {
            TensorRecord::F32 { name, .. } | TensorRecord::I8 { name, .. } => name,
        }
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_records<W: Write>(w: &mut W, records: &[TensorRecord]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, records.len() as u32)?;
    for rec in records {
        let (name, shape) = match rec {
            TensorRecord::F32 { name, shape, .. } => (name, shape),
            TensorRecord::I8 { name, shape, .. } => (name, shape),
        };
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        match rec {
            TensorRecord::F32 { values, .. } => {
                w.write_all(&[DTYPE_F32])?;
                write_u32(w, shape.len() as u32)?;
                for &d in shape {
                    write_u32(w, d as u32)?;
                }
                if values.len() != shape.iter().product::<usize>() {
                    return Err(Error::Checkpoint(format!(
                        "record {name}: {} values for shape {shape:?}",
                        values.len()
                    )));
                }
                write_f32s(w, values)?;
            }
            TensorRecord::I8 { values, scales, .. } => {
                if shape.len() != 2 {
                    return Err(Error::Checkpoint(format!(
                        "record {name}: i8 records must be rank-2, got {shape:?}"
                    )));
                }
                if values.len() != shape[0] * shape[1] || scales.len() != shape[0] {
                    return Err(Error::Checkpoint(format!(
                        "record {name}: payload does not match shape {shape:?}"
                    )));
                }
                w.write_all(&[DTYPE_I8])?;
                write_u32(w, shape.len() as u32)?;
                for &d in shape {
                    write_u32(w, d as u32)?;
                }
                let bytes: Vec<u8> = values.iter().map(|&v| v as u8).collect();
                w.write_all(&bytes)?;
                write_f32s(w, scales)?;
            }
        }
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<TensorRecord>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("record name is not UTF-8: {e}")))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        match dtype[0] {
            DTYPE_F32 => {
                let values = read_f32s(r, numel)?;
                records.push(TensorRecord::F32 { name, shape, values });
            }
            DTYPE_I8 => {
                if rank != 2 {
                    return Err(Error::Checkpoint(format!(
                        "record {name}: i8 records must be rank-2, got rank {rank}"
                    )));
                }
                let mut bytes = vec![0u8; numel];
                r.read_exact(&mut bytes)?;
                let values: Vec<i8> = bytes.iter().map(|&b| b as i8).collect();
                let scales = read_f32s(r, shape[0])?;
                records.push(TensorRecord::I8 {
                    name,
                    shape,
                    values,
                    scales,
                });
            }
            t => {
                return Err(Error::Checkpoint(format!(
                    "record {name}: unknown dtype tag {t}"
                )));
            }
        }
    }
    // trailing bytes mean a corrupt or mismatched file
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(records)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write all parameters as f32 records plus a `<path>.json` config sidecar.
pub fn save_model(path: &Path, model: &LanguageModel) -> Result<()> {
    let records: Vec<TensorRecord> = model
        .params
        .iter()
        .map(|p| TensorRecord::F32 {
            name: p.name.clone(),
            shape: p.shape.clone(),
            values: p.values.clone(),
        })
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, &records)?;
    w.flush()?;
    let mut config_json = serde_json::to_string_pretty(&model.config)?;
    config_json.push('\n');
    std::fs::write(sidecar_path(path), config_json)?;
    Ok(())
}

/// Rebuild a model from a checkpoint and its config sidecar. The parameter
/// skeleton comes from the config; the file must cover it exactly.
pub fn load_model(path: &Path) -> Result<LanguageModel> {
    let config_text = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
        Error::Checkpoint(format!(
            "missing config sidecar {}: {e}",
            sidecar_path(path).display()
        ))
    })?;
    let mut r = BufReader::new(File::open(path)?);
    load_model_impl(&mut r, &config_text)
}

/// In-memory variant of [`load_model`] for callers without a filesystem.
pub fn load_model_from_bytes(checkpoint: &[u8], config_json: &str) -> Result<LanguageModel> {
    load_model_impl(&mut &checkpoint[..], config_json)
}

fn load_model_impl<R: Read>(r: &mut R, config_text: &str) -> Result<LanguageModel> {
    let config: ModelConfig = serde_json::from_str(config_text)?;
    let records = read_records(r)?;
    let mut model = LanguageModel::new(config)?;
    if records.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} records, model needs {}",
            records.len(),
            model.params.len()
        )));
    }
    for rec in records {
        let TensorRecord::F32 { name, shape, values } = rec else {
            return Err(Error::Checkpoint(format!(
                "model checkpoints must be all-f32, record {} is i8",
                rec.name()
            )));
        };
        let Some(p) = model.params.get_mut(&name) else {
            return Err(Error::Checkpoint(format!("unknown parameter {name}")));
        };
        if p.shape != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {shape:?} does not match model {:?}",
                p.shape
            )));
        }
        p.values = values;
    }
    model.set_mode(Mode::FullPrecision);
    Ok(model)
}

/// Quantized export: quantizable weights as i8 records (codes + per-row
/// scales), everything else verbatim as f32.
pub fn save_quantized(path: &Path, model: &LanguageModel) -> Result<()> {
    let quantized = model.quantized_params()?;
    let records: Vec<TensorRecord> = model
        .params
        .iter()
        .map(|p| match quantized.get(&p.name) {
            Some(q) => TensorRecord::I8 {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: q.values.clone(),
                scales: q.scales.clone(),
            },
            None => TensorRecord::F32 {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.values.clone(),
            },
        })
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, &records)?;
    w.flush()?;
    Ok(())
}

/// Read the i8 records of a quantized export.
pub fn read_quantized(path: &Path) -> Result<Vec<(String, QuantizedMatrix)>> {
    let mut r = BufReader::new(File::open(path)?);
    let records = read_records(&mut r)?;
    Ok(records
        .into_iter()
        .filter_map(|rec| match rec {
            TensorRecord::I8 {
                name,
                shape,
                values,
                scales,
            } => Some((
                name,
                QuantizedMatrix {
                    rows: shape[0],
                    cols: shape[1],
                    values,
                    scales,
                },
            )),
            TensorRecord::F32 { .. } => None,
        })
        .collect())
}
