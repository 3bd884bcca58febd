//! `PORTFEAT` binary feature files: the 8-byte magic, then little-endian
//! `u32` version, `u32` rows, `u32` cols, then `rows·cols` `f32` values.

use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"PORTFEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 3;

/// Row-major `rows × cols` matrix of pre-extracted features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("feature_matrix", &[rows, cols], &[data.len()]));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const KIND: &str = "feature";
        if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::BadMagic { kind: KIND });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                kind: KIND,
                msg: format!("header needs {HEADER_LEN} bytes, got {}", bytes.len()),
            });
        }
        let word = |i: usize| {
            u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes"))
        };
        let version = word(0);
        if version != FEATURE_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: KIND,
                version,
            });
        }
        let (rows, cols) = (word(1) as usize, word(2) as usize);
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Truncated {
                kind: KIND,
                msg: format!("{rows}×{cols} payload overflows"),
            })?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Truncated {
                kind: KIND,
                msg: format!("expected {expected} payload bytes, got {}", payload.len()),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(FeatureMatrix { rows, cols, data })
    }
}

pub fn write_features(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    crate::fsutil::write_atomic(path.as_ref(), &m.to_bytes())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes)
}
