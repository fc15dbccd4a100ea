//! Little-endian byte encoding shared by the model and checkpoint formats.

use thiserror::Error;

/// Errors raised while decoding any of the binary formats.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input: needed {needed} bytes at offset {offset}")]
    Truncated { needed: usize, offset: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid content: {0}")]
    Invalid(String),
}

#[derive(Debug, Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length exceeds u32"));
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.len_u32(vs.len());
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], LoadError> {
        if self.buf.len() - self.pos < n {
            return Err(LoadError::Truncated {
                needed: n,
                offset: self.pos,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), LoadError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if &found != expected {
            return Err(LoadError::BadMagic {
                expected: *expected,
                found,
            });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<(), LoadError> {
        let v = self.u32()?;
        if v != supported {
            return Err(LoadError::UnsupportedVersion(v));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, LoadError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, LoadError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, LoadError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a u32 element count, rejecting counts that cannot fit in the
    /// remaining input given a minimum per-element size.
    pub fn count(&mut self, min_elem_bytes: usize) -> Result<usize, LoadError> {
        let n = self.u32()? as usize;
        let needed = n.saturating_mul(min_elem_bytes.max(1));
        if needed > self.buf.len() - self.pos {
            return Err(LoadError::Truncated {
                needed,
                offset: self.pos,
            });
        }
        Ok(n)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, LoadError> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<(), LoadError> {
        let rest = self.buf.len() - self.pos;
        if rest != 0 {
            return Err(LoadError::TrailingBytes(rest));
        }
        Ok(())
    }
}
