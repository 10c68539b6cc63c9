//! Little-endian byte reading/writing for the on-disk formats.
//!
//! Every read is bounds-checked and returns a structured error; a corrupted
//! or truncated file must never panic.

use crate::error::{Error, Result};

pub const FNV_OFFSET: u64 = 0xcbf29ce484222325;
pub const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over a byte slice. Any single-byte change alters the result.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    /// Everything after the current position.
    pub fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let s = self.take(4)?;
        let found = [s[0], s[1], s[2], s[3]];
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let s = self.take(2)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    /// `n` f64 values; length is validated before any allocation.
    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        self.check_capacity(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn u16_vec(&mut self, n: usize) -> Result<Vec<u16>> {
        self.check_capacity(n, 2)?;
        (0..n).map(|_| self.u16()).collect()
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        Ok(self.take(n)?.to_vec())
    }

    /// Length-prefixed (u16) UTF-8 string.
    pub fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|e| Error::Corrupt(format!("invalid utf-8 string: {e}")))
    }

    /// Guards count fields against absurd values before allocation.
    pub fn check_capacity(&self, n: usize, item_size: usize) -> Result<()> {
        let need = (n as u64).saturating_mul(item_size as u64);
        if need > self.remaining() as u64 {
            return Err(Error::Truncated {
                expected: self.pos as u64 + need,
                actual: self.buf.len() as u64,
            });
        }
        Ok(())
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after payload",
                self.remaining()
            )));
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn string(&mut self, s: &str) {
        assert!(s.len() <= u16::MAX as usize, "string too long for u16 prefix");
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }
}
