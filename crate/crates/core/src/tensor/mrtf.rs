//! The MRTF binary tensor container.
//!
//! Layout: `b"MRTF"`, version `u8`, dtype code `u8` (0 = f32, 1 = f64, 2 = u8),
//! rank `u8`, `rank` little-endian `u64` extents, then the row-major
//! little-endian payload.

use std::fs;
use std::path::Path;

use super::{ByteTensor, F32Tensor, NdArray, Tensor};
use crate::error::{Error, Result};

pub const MRTF_MAGIC: &[u8; 4] = b"MRTF";
pub const MRTF_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// A tensor of any storable dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(F32Tensor),
    F64(Tensor),
    U8(ByteTensor),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }

    /// Encodes into a fresh MRTF byte buffer.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let shape = self.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::dim(format!("rank {} exceeds MRTF limit", shape.len())));
        }
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(7 + 8 * shape.len() + n * self.dtype().size());
        out.extend_from_slice(MRTF_MAGIC);
        out.push(MRTF_VERSION);
        out.push(self.dtype().code());
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            AnyTensor::U8(t) => out.extend_from_slice(t.data()),
        }
        Ok(out)
    }

    /// Decodes one tensor from the front of `bytes`; returns it with the number
    /// of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
        if bytes.len() < 7 {
            return Err(Error::format(bytes.len() as u64, "truncated MRTF header"));
        }
        if &bytes[..4] != MRTF_MAGIC {
            return Err(Error::format(0, "bad MRTF magic"));
        }
        if bytes[4] != MRTF_VERSION {
            return Err(Error::format(4, format!("unsupported MRTF version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5])
            .ok_or_else(|| Error::format(5, format!("unknown dtype code {}", bytes[5])))?;
        let rank = bytes[6] as usize;
        let mut off = 7;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let chunk = bytes
                .get(off..off + 8)
                .ok_or_else(|| Error::format(off as u64, "truncated MRTF extents"))?;
            let e = u64::from_le_bytes(chunk.try_into().expect("8-byte slice"));
            shape.push(usize::try_from(e).map_err(|_| Error::format(off as u64, "extent overflows usize"))?);
            off += 8;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::format(7, "element count overflows"))?;
        let payload_len = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::format(7, "payload size overflows"))?;
        let payload = bytes
            .get(off..off + payload_len)
            .ok_or_else(|| Error::format(bytes.len() as u64, "truncated MRTF payload"))?;
        let tensor = match dtype {
            DType::F32 => AnyTensor::F32(NdArray::new(
                &shape,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )?),
            DType::F64 => AnyTensor::F64(NdArray::new(
                &shape,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )?),
            DType::U8 => AnyTensor::U8(NdArray::new(&shape, payload.to_vec())?),
        };
        Ok((tensor, off + payload_len))
    }

    pub fn into_f64(self) -> Result<Tensor> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            other => Err(Error::contract(format!("expected f64 tensor, found {:?}", other.dtype()))),
        }
    }
}

pub fn write_mrtf(path: impl AsRef<Path>, tensor: &AnyTensor) -> Result<()> {
    fs::write(path, tensor.encode()?)?;
    Ok(())
}

pub fn read_mrtf(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io_at(path.as_ref(), e))?;
    let (t, used) = AnyTensor::decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::format(used as u64, "trailing bytes after MRTF payload"));
    }
    Ok(t)
}
