use std::path::Path;

use super::{read_u32, write_atomic};
use crate::diffusion::Correspondence;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FPCR";
const NO_MATCH: u32 = u32::MAX;

/// `FPCR`, u32 N, then per target token: u32 source token (or `0xFFFFFFFF`)
/// and u8 visibility, little-endian.
pub fn encode_correspondence(c: &Correspondence) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 5 * c.tokens());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(c.tokens() as u32).to_le_bytes());
    for m in c.matches() {
        match m {
            Some(j) => {
                out.extend_from_slice(&(*j as u32).to_le_bytes());
                out.push(1);
            }
            None => {
                out.extend_from_slice(&NO_MATCH.to_le_bytes());
                out.push(0);
            }
        }
    }
    out
}

/// Decodes onto a `height x width` grid and re-checks every invariant.
pub fn decode_correspondence(bytes: &[u8], height: usize, width: usize, context: &str) -> Result<Correspondence> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::format(context, "missing FPCR magic"));
    }
    let mut at = 4;
    let n = read_u32(bytes, &mut at, context)? as usize;
    if n != height * width {
        return Err(Error::format(context, format!("{n} records for a {height}x{width} grid")));
    }
    if bytes.len() != 8 + 5 * n {
        return Err(Error::format(context, format!("{} bytes, expected {}", bytes.len(), 8 + 5 * n)));
    }
    let mut matches = Vec::with_capacity(n);
    for i in 0..n {
        let src = read_u32(bytes, &mut at, context)?;
        let vis = bytes[at];
        at += 1;
        matches.push(match (vis, src) {
            (0, NO_MATCH) => None,
            (1, j) if (j as usize) < n => Some(j as usize),
            (1, j) => return Err(Error::format(context, format!("record {i}: visible but source token {j} is out of range"))),
            (0, j) => return Err(Error::format(context, format!("record {i}: hidden row carries source token {j}"))),
            (v, _) => return Err(Error::format(context, format!("record {i}: visibility byte {v}"))),
        });
    }
    Correspondence::new(height, width, matches)
}

pub fn write_correspondence(path: &Path, c: &Correspondence) -> Result<()> {
    write_atomic(path, &encode_correspondence(c))
}

pub fn read_correspondence(path: &Path, height: usize, width: usize) -> Result<Correspondence> {
    decode_correspondence(&std::fs::read(path)?, height, width, &path.display().to_string())
}
