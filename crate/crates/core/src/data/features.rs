//! Feature files: one matrix of per-chunk features.
//!
//! ```text
//! bytes 0..4   magic "DYFT"
//! bytes 4..8   version (u32 LE) = 1
//! bytes 8..12  rows N (u32 LE)
//! bytes 12..16 cols d (u32 LE)
//! then N·d f32 LE values, row-major
//! ```
//!
//! Values are stored at single precision and widened on load.

use std::fs;
use std::path::Path;

use super::{DataError, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"DYFT";
pub const FEATURE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_features(t: &Tensor) -> Result<Vec<u8>> {
    let (n, d) = t.dims2()?;
    let (n32, d32) = match (u32::try_from(n), u32::try_from(d)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(DataError::Format(format!("{n}×{d} exceeds the header range"))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for &v in t.values() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(DataError::NonFinite);
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(DataError::BadMagic);
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(DataError::Version(version));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + 4 * n * d;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes(bytes.len() - expected));
    }
    let mut values = Vec::with_capacity(n * d);
    for c in bytes[HEADER_LEN..].chunks_exact(4) {
        let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(DataError::NonFinite);
        }
        values.push(f64::from(v));
    }
    Ok(Tensor::new(&[n, d], values)?)
}

pub fn write_feature_file(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(t)?;
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_features(&bytes)
}
