//! Bit-exact on-disk formats: `.tns` tensors, `.ecw` network weights and
//! binary PNM rasters.
//!
//! Decoders never trust header sizes: every length is checked against the
//! bytes actually present before anything is allocated.

mod ecw;
mod pnm;
mod tns;

pub use ecw::{decode_ecw, encode_ecw, read_ecw, write_ecw, ECW_MAGIC};
pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm};
pub use tns::{
    decode_tns, encode_tns, probmap_from_tensor, read_probmap, read_tns, write_probmap, write_tns, Tensor, DTYPE_F32,
    TNS_MAGIC,
};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over an input buffer.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, what }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::corrupt(format!(
                "{}: truncated, needed {n} more bytes but only {} remain",
                self.what,
                self.buf.len()
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self
            .take(4)
            .map_err(|_| Error::corrupt(format!("{}: too short for magic", self.what)))?;
        if got != magic {
            return Err(Error::corrupt(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if !self.buf.is_empty() {
            return Err(Error::corrupt(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len()
            )));
        }
        Ok(())
    }
}
