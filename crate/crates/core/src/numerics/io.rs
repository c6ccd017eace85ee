//! `MCT1` tensor serialization.
//!
//! Layout: magic `MCT1`, `u32` rank, `rank` × `u32` extents, a `u8`
//! precision flag (0 = f32, 1 = f64), then the row-major values. All
//! integers and floats are little-endian.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MCT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub fn write_tensor(out: &mut Vec<u8>, t: &Tensor, precision: Precision) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match precision {
        Precision::F32 => {
            out.push(0);
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            out.push(1);
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

pub fn tensor_to_bytes(t: &Tensor, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t, precision);
    out
}

/// Byte cursor that reports the failing offset on truncation.
pub struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        Cursor { bytes, pos: 0, kind }
    }

    pub fn at(bytes: &'a [u8], pos: usize, kind: &'static str) -> Self {
        Cursor { bytes, pos, kind }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            kind: self.kind,
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: wanted {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format {
                kind: self.kind,
                offset: start as u64,
                detail: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads one tensor at the cursor, returning it with the precision it was stored in.
pub fn read_tensor(cur: &mut Cursor<'_>) -> Result<(Tensor, Precision)> {
    cur.expect_magic(TENSOR_MAGIC)?;
    let rank = cur.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(cur.fail(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = cur.u32()? as usize;
        if d == 0 {
            return Err(cur.fail("zero extent"));
        }
        shape.push(d);
    }
    let len: usize = shape.iter().product();
    let flag_pos = cur.position();
    let (precision, width) = match cur.u8()? {
        0 => (Precision::F32, 4),
        1 => (Precision::F64, 8),
        f => {
            return Err(Error::Format {
                kind: "tensor",
                offset: flag_pos as u64,
                detail: format!("unknown precision flag {f}"),
            })
        }
    };
    let raw = cur.take(len * width)?;
    let data = match precision {
        Precision::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Precision::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok((Tensor::from_vec(&shape, data)?, precision))
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor::new(bytes, "tensor");
    let (t, _) = read_tensor(&mut cur)?;
    if !cur.is_at_end() {
        return Err(cur.fail("trailing bytes after tensor"));
    }
    Ok(t)
}
