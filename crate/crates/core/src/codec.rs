// SPDX-License-Identifier: Apache-2.0

//! Little-endian binary framing shared by the knowledge-base and checkpoint
//! files: 4 magic bytes, a `u32` version, a payload, then a CRC-32 of
//! everything before it.

use std::path::Path;

use crate::error::{CraftError, Result};

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Encoder { buf }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Counts and dimensions are stored as `u32`.
    pub fn count(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| CraftError::invalid("dimension", "exceeds u32"))?;
        self.u32(v);
        Ok(())
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        let bytes = self.finish();
        std::fs::write(path, bytes).map_err(|e| CraftError::io(path, e))
    }
}

pub(crate) struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Validates magic and version; the checksum is verified by [`Decoder::finish`].
    pub fn new(bytes: &'a [u8], magic: &'static [u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(CraftError::Truncated("header"));
        }
        if &bytes[..4] != magic {
            return Err(CraftError::BadMagic {
                expected: std::str::from_utf8(magic).unwrap_or("?"),
            });
        }
        let mut dec = Decoder { bytes, pos: 4 };
        let found = dec.u32("version")?;
        if found != version {
            return Err(CraftError::VersionMismatch {
                found,
                expected: version,
            });
        }
        Ok(dec)
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CraftError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(CraftError::Truncated(what));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn count(&mut self, what: &'static str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(CraftError::Truncated(what))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Requires exactly the 4-byte CRC trailer to remain, and that it matches.
    pub fn finish(self) -> Result<()> {
        let rest = self.bytes.len() - self.pos;
        if rest < 4 {
            return Err(CraftError::Truncated("checksum"));
        }
        if rest > 4 {
            return Err(CraftError::invalid("file", format!("{} trailing bytes", rest - 4)));
        }
        let stored = u32::from_le_bytes(self.bytes[self.pos..].try_into().unwrap());
        let computed = crc32fast::hash(&self.bytes[..self.pos]);
        if stored != computed {
            return Err(CraftError::ChecksumMismatch { stored, computed });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CraftError::io(path, e))
}
