//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DIFFLM\0\x01"
//! version    u32
//! dtype      u8       0 = f32, 1 = f64
//! header     u32 length, then UTF-8 JSON text
//! count      u32      number of parameters
//! per parameter:
//!   name     u32 length, then UTF-8 bytes
//!   rank     u32
//!   dims     rank x u64
//!   values   raw little-endian elements of the dtype
//! ```

use super::params::ParameterStore;
use super::tensor::{DType, Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DIFFLM\0\x01";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<F: Float>(header: &str, store: &ParameterStore<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + header.len() + store.num_scalars() * F::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(F::DTYPE.code());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Header text and element type, without decoding parameters.
pub fn peek(bytes: &[u8]) -> Result<(String, DType)> {
    let mut r = Reader { bytes, pos: 0 };
    read_preamble(&mut r)
}

fn read_preamble(r: &mut Reader<'_>) -> Result<(String, DType)> {
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let code = r.take(1)?[0];
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
    let header = r.string()?;
    Ok((header, dtype))
}

pub fn decode<F: Float>(bytes: &[u8]) -> Result<(String, ParameterStore<F>)> {
    let mut r = Reader { bytes, pos: 0 };
    let (header, dtype) = read_preamble(&mut r)?;
    if dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "file holds {dtype:?} values, requested {:?}",
            F::DTYPE
        )));
    }
    let count = r.u32()? as usize;
    let mut store = ParameterStore::new();
    let width = dtype.width();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width)?;
        let data = raw.chunks_exact(width).map(F::read_le).collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((header, store))
}
