//! Little-endian binary helpers and the MSEG tensor format.
//!
//! MSEG layout: `b"MSEG"`, version byte `1`, rank byte, `rank` × u32 dims,
//! then `product(dims)` IEEE-754 f32 values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MSEG_MAGIC: &[u8; 4] = b"MSEG";
pub const MSEG_VERSION: u8 = 1;

/// Cursor over a byte buffer that reports absolute offsets in errors.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                expected: self.pos + n,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let offset = self.pos;
        let found = self.take(4)?;
        if found != expected {
            return Err(Error::BadMagic {
                offset,
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u8) -> Result<()> {
        let offset = self.pos;
        let v = self.u8()?;
        if v != supported {
            return Err(Error::UnsupportedVersion { version: v, offset });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let offset = self.pos;
        let bytes = n
            .checked_mul(4)
            .ok_or(Error::DimOverflow { offset })?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Length-prefixed (u16) UTF-8 string.
    pub fn str16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let offset = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Malformed {
            offset,
            reason: "invalid UTF-8".into(),
        })
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Malformed {
                offset: self.pos,
                reason: format!("{} trailing bytes", self.remaining()),
            });
        }
        Ok(())
    }
}

pub fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Contract(format!("string of {} bytes exceeds u16 length", s.len())))?;
    put_u16(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Appends the MSEG encoding of `t` to `out`.
pub fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Contract(format!("rank {} exceeds 255", t.rank())))?;
    out.extend_from_slice(MSEG_MAGIC);
    out.push(MSEG_VERSION);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dimension {d} exceeds u32")))?;
        put_u32(out, d);
    }
    put_f32s(out, t.data());
    Ok(())
}

pub fn encode_tensor(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    write_tensor(&mut out, t)?;
    Ok(out)
}

/// Reads one MSEG tensor at the reader's position.
pub fn read_tensor(r: &mut ByteReader<'_>) -> Result<Tensor<f32>> {
    r.magic(MSEG_MAGIC)?;
    r.version(MSEG_VERSION)?;
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let offset = r.position();
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(Error::Malformed {
                offset,
                reason: "zero-sized dimension".into(),
            });
        }
        count = count.checked_mul(d).ok_or(Error::DimOverflow { offset })?;
        shape.push(d);
    }
    let offset = r.position();
    let need = count.checked_mul(4).ok_or(Error::DimOverflow { offset })?;
    if r.remaining() < need {
        return Err(Error::Truncated {
            expected: offset + need,
            actual: offset + r.remaining(),
        });
    }
    let data = r.f32s(count)?;
    Tensor::new(shape, data)
}

/// Decodes a buffer holding exactly one MSEG tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = ByteReader::new(bytes);
    let t = read_tensor(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_tensor(t)?)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Writes through a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
