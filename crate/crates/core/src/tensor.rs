//! Dense row-major tensors and the `NVT1` binary file format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 4            | magic `NVT1`                              |
//! | 1            | dtype: 1 = f32, 2 = f64                   |
//! | 1            | ndim                                      |
//! | 4 * ndim     | dims as u32                               |
//! | rest         | payload, row-major, `product(dims)` items |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NVT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Values are always held as `f64`; the dtype only matters on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format("too many dimensions".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut out: W, dtype: DType) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&[dtype as u8, self.dims.len() as u8])?;
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(self.data.len() * dtype.size());
        for &v in &self.data {
            match dtype {
                DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<(Self, DType)> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<(Self, DType)> {
        let short = || Error::Format("truncated tensor header".into());
        if bytes.len() < 6 {
            return Err(short());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, expected NVT1".into()));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(short());
        }
        let dims: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let payload = &bytes[header..];
        if Some(payload.len()) != count.checked_mul(dtype.size()) {
            return Err(Error::Format(format!(
                "payload is {} bytes, dims {dims:?} with {dtype:?} need {}",
                payload.len(),
                count.saturating_mul(dtype.size())
            )));
        }
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok((Self { dims, data }, dtype))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, DType)> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, dtype)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}
