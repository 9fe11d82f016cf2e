//! Checkpoint container.
//!
//! ```text
//! RFCNET-CHECKPOINT\n
//! version=1\n
//! <RfcConfig key=value lines>
//! tensors=<count>\n
//! \n
//! then per tensor, all little-endian:
//!   u32 name length, name (UTF-8),
//!   u32 rank (always 4), rank × u64 dims,
//!   numel × f32 values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{Buffer, Element, Shape};
use crate::error::{Error, Result};
use crate::ldcs::KernelSet;
use crate::rfcnet::{RfcConfig, RfcModel};

pub const CHECKPOINT_MAGIC: &str = "RFCNET-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A tensor as stored in a checkpoint, keyed by parameter name.
pub type NamedTensor = (String, Buffer<f32>);

/// Serializes config and parameters (as f32) to bytes.
pub fn write_checkpoint<T: Element>(model: &RfcModel<T>) -> Vec<u8> {
    let params = model.parameters();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("version={CHECKPOINT_VERSION}\n").as_bytes());
    out.extend_from_slice(model.config.to_kv_lines().as_bytes());
    out.extend_from_slice(format!("tensors={}\n\n", params.len()).as_bytes());
    for (name, p) in &params {
        let v = p.value();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in v.shape().dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in v.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Element>(model: &RfcModel<T>, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<V>(&self, message: impl Into<String>) -> Result<V> {
        Err(Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return self.fail("unterminated header line");
        };
        let Ok(s) = std::str::from_utf8(&rest[..end]) else {
            return self.fail("header is not UTF-8");
        };
        self.pos += end + 1;
        Ok(s)
    }
}

/// Parses a checkpoint into its config and named f32 tensors.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(RfcConfig, Vec<NamedTensor>)> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.is_empty() {
        return r.fail("empty file");
    }
    if r.line()? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return r.fail(format!("missing {CHECKPOINT_MAGIC} magic"));
    }
    let mut header = BTreeMap::new();
    loop {
        let at = r.pos;
        let line = r.line()?;
        if line.is_empty() {
            break;
        }
        let Some((k, v)) = line.split_once('=') else {
            r.pos = at;
            return r.fail(format!("header line {line:?} is not key=value"));
        };
        header.insert(k.to_string(), v.to_string());
    }
    match header.get("version").map(|v| v.parse::<u32>()) {
        Some(Ok(CHECKPOINT_VERSION)) => {}
        Some(Ok(v)) => {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported checkpoint version {v}"),
            })
        }
        _ => {
            return Err(Error::Format {
                offset: 0,
                message: "missing or invalid version".into(),
            })
        }
    }
    let count: usize = header
        .get("tensors")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: "missing tensors count".into(),
        })?;
    let config = RfcConfig::from_kv(&header)?;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: name_at as u64,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")?;
        if rank != 4 {
            return r.fail(format!("tensor {name}: rank {rank}, expected 4"));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u64("dimension")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let Some(nbytes) = shape.numel().checked_mul(4) else {
            return r.fail(format!("tensor {name}: shape {shape} too large"));
        };
        let raw = r.take(nbytes, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Buffer::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((config, tensors))
}

/// Rebuilds the model described by the checkpoint and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<RfcModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, tensors) = read_checkpoint(&bytes)?;
    let model = RfcModel::<f32>::build(&config)?;
    let params = model.parameters();
    if params.len() != tensors.len() {
        return Err(Error::Validation(format!(
            "checkpoint holds {} tensors, config implies {}",
            tensors.len(),
            params.len()
        )));
    }
    for ((name, _), (stored, _)) in params.iter().zip(&tensors) {
        if name != stored {
            return Err(Error::Validation(format!(
                "expected tensor {name}, found {stored}"
            )));
        }
    }
    let values: Vec<Buffer<f32>> = tensors.into_iter().map(|(_, b)| b).collect();
    model.load_state(&values)?;
    Ok(model)
}

/// As [`load_checkpoint`], failing unless the stored config equals `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &RfcConfig) -> Result<RfcModel<f32>> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(Error::Validation(format!(
            "checkpoint config differs from expected:\n{}vs\n{}",
            model.config.to_kv_lines(),
            expected.to_kv_lines()
        )));
    }
    Ok(model)
}
