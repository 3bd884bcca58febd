//! `PORTCKPT` parameter files: the 8-byte magic, little-endian `u32`
//! version and record count, then per record a `u32`-length UTF-8 name,
//! `u32` rank, `u32` dims and the `f32` payload.
//!
//! The model configuration travels in a JSON sidecar named
//! `<checkpoint>.json`.

use std::path::{Path, PathBuf};

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{ModelConfig, PortModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PORTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode<F: Real>(store: &ParamStore<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated {
                kind: KIND,
                msg: format!("{what} needs {n} bytes at offset {}", self.at),
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { kind: KIND });
    }
    let mut r = Reader { bytes, at: 8 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: KIND,
            version,
        });
    }
    let count = r.u32("record count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|e| Error::Truncated {
                kind: KIND,
                msg: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Truncated {
                kind: KIND,
                msg: format!("shape {shape:?} overflows"),
            })?;
        let payload = r.take(numel.saturating_mul(4), "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(Record { name, shape, data });
    }
    if r.at != bytes.len() {
        return Err(Error::Truncated {
            kind: KIND,
            msg: format!("{} trailing bytes", bytes.len() - r.at),
        });
    }
    Ok(out)
}

/// Copies records into a store built for the same model, matching by name.
pub fn load_into<F: Real>(store: &mut ParamStore<F>, records: &[Record]) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            records.len(),
            store.len()
        )));
    }
    for rec in records {
        let id = store.find(&rec.name).ok_or_else(|| {
            Error::Config(format!(
                "checkpoint parameter `{}` is not in the model",
                rec.name
            ))
        })?;
        let p = store.get_mut(id);
        if p.value.shape() != rec.shape.as_slice() {
            return Err(Error::shape("load checkpoint", p.value.shape(), &rec.shape));
        }
        let data = rec.data.iter().map(|&v| F::of(v as f64)).collect();
        p.value = Tensor::new(&rec.shape, data)?;
    }
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the parameters and the config sidecar, each atomically.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    cfg: &ModelConfig,
    store: &ParamStore<F>,
) -> Result<()> {
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(cfg)?)?;
    write_atomic(path, &encode(store))
}

/// Rebuilds a model from its sidecar config and loads the parameters.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(PortModel, ParamStore<F>)> {
    let side = sidecar_path(path);
    let cfg_bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode(&bytes)?;
    let (model, mut store) = PortModel::init::<F>(&cfg, 0)?;
    load_into(&mut store, &records)?;
    Ok((model, store))
}
