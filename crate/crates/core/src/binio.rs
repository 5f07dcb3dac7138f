//! Little-endian helpers for the binary file formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], format: &'static str) -> Self {
        Self { buf, pos: 0, format }
    }

    pub fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            format: self.format,
            reason: reason.into(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(self.err(format!("bad magic {:?}", String::from_utf8_lossy(got))));
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

    /// Reads `count` floats of `width` bytes (4 or 8).
    pub fn floats(&mut self, count: usize, width: u8) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(width as usize)
            .ok_or_else(|| self.err("shape overflow"))?;
        let raw = self.take(bytes)?;
        let out = match width {
            4 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            8 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            w => return Err(self.err(format!("unsupported float width {w}"))),
        };
        Ok(out)
    }

    pub fn string(&mut self, len: usize) -> Result<String> {
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_floats(out: &mut Vec<u8>, data: &[f64], width: u8) {
    match width {
        4 => data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        _ => data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

/// Checked product of header extents.
pub(crate) fn extent(r: &Reader<'_>, dims: &[u32]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| r.err("shape overflow"))
}
