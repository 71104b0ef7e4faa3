//! IDX reader (the MNIST container format).
//!
//! Layout: a big-endian `u32` magic (`0x00000803` = 2051 for rank-3 unsigned
//! byte images, `0x00000801` = 2049 for rank-1 labels), one big-endian `u32`
//! per dimension, then the unsigned-byte payload. Gzip-compressed files are
//! detected by their header and decompressed transparently.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("IDX file truncated: needed {n} bytes at offset {}", self.pos),
            )
            .into());
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parsed IDX payload: dims and raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<IdxArray> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.u32_be()?;
    if magic != expected_magic {
        return Err(Error::format(format!(
            "IDX magic {magic} does not match expected {expected_magic}"
        )));
    }
    let rank = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => return Err(Error::format(format!("unsupported IDX magic {other}"))),
    };
    let dims = (0..rank)
        .map(|_| cur.u32_be().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let len: usize = dims.iter().product();
    let data = cur.take(len)?.to_vec();
    Ok(IdxArray { dims, data })
}

pub fn read_idx(path: &Path, expected_magic: u32) -> Result<IdxArray> {
    parse_idx(&read_maybe_gz(path)?, expected_magic)
}

#[cfg(test)]
pub(crate) fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}
