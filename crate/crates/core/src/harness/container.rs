//! Binary tensor files.
//!
//! | offset        | size      | field                                     |
//! |---------------|-----------|-------------------------------------------|
//! | 0             | 4         | magic `ASPR`                              |
//! | 4             | 2         | format version, u16 LE (currently 1)      |
//! | 6             | 1         | dtype code (1 = f64)                      |
//! | 7             | 1         | rank `r`                                  |
//! | 8             | 8·r       | shape, u64 LE each                        |
//! | 8 + 8·r       | 8·∏shape  | payload, f64 LE, row-major                |
//! | end − 4       | 4         | CRC-32 (IEEE) of the payload, u32 LE      |

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ASPR";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorContainer {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(Error::Config(format!("rank {} exceeds 255", shape.len())));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::shape("TensorContainer payload", count, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(a: ArrayView2<f64>) -> Self {
        Self {
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn rows(rows: &[Vec<f64>], width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::shape("TensorContainer rows", width, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), width], data)
    }

    pub fn into_matrix(self) -> Result<Array2<f64>> {
        match self.shape[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), self.data).expect("shape checked on construction")),
            _ => Err(Error::Config(format!("expected a rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn into_rows(self) -> Result<Vec<Vec<f64>>> {
        let m = self.into_matrix()?;
        Ok(m.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * (self.shape.len() + self.data.len()));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(DTYPE_F64);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let start = out.len();
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a container; `origin` only labels errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        if bytes.len() < 12 {
            return Err(bad(format!("{} bytes is shorter than any container", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(bad("missing ASPR magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        if bytes[6] != DTYPE_F64 {
            return Err(bad(format!("unsupported dtype code {}", bytes[6])));
        }
        let rank = bytes[7] as usize;
        let header = 8 + 8 * rank;
        if bytes.len() < header + 4 {
            return Err(bad("truncated shape".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: u64 = 1;
        for k in 0..rank {
            let d = u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().expect("8 bytes"));
            count = count.checked_mul(d).ok_or_else(|| bad("shape overflows".into()))?;
            shape.push(usize::try_from(d).map_err(|_| bad(format!("dimension {d} too large")))?);
        }
        let payload_len = count.checked_mul(8).ok_or_else(|| bad("shape overflows".into()))?;
        if (bytes.len() - header - 4) as u64 != payload_len {
            return Err(bad(format!(
                "payload is {} bytes, shape {shape:?} needs {payload_len}",
                bytes.len() - header - 4
            )));
        }
        let payload = &bytes[header..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(bad(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
