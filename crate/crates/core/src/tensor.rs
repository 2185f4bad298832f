//! FMT1 tensor files.
//!
//! Layout: the four magic bytes `FMT1`, one byte holding the rank, `rank`
//! little-endian `u32` dimensions, then the row-major payload as
//! little-endian IEEE-754 `f32` values. Images, model parameters and logits
//! all use this format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FMT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::validation(format!(
                "tensor dims {dims:?} imply {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::validation("tensor rank exceeds 255"));
        }
        Ok(Tensor { dims, data })
    }

    /// An `n × c` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::validation("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn rows(&self) -> Result<Vec<Vec<f32>>> {
        if self.dims.len() != 2 {
            return Err(Error::integrity(format!(
                "expected a rank-2 tensor, got rank {}",
                self.dims.len()
            )));
        }
        let cols = self.dims[1];
        if cols == 0 {
            return Ok(vec![Vec::new(); self.dims[0]]);
        }
        Ok(self.data.chunks(cols).map(<[f32]>::to_vec).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a buffer; `origin` names the source in error messages.
    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let corrupt = |what: &str| Error::integrity(format!("{origin}: {what}"));
        if bytes.len() < 5 || bytes[..4] != MAGIC {
            return Err(corrupt("bad FMT1 magic"));
        }
        let rank = bytes[4] as usize;
        let header = 5 + 4 * rank;
        if bytes.len() < header {
            return Err(corrupt("truncated header"));
        }
        let dims: Vec<usize> = bytes[5..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt("dimension overflow"))?;
        let payload = &bytes[header..];
        if payload.len() != count * 4 {
            return Err(corrupt(&format!(
                "payload has {} bytes, dims {dims:?} need {}",
                payload.len(),
                count * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::decode(&bytes, &path.display().to_string())
    }
}
