//! `.vfm` frame-feature files, little-endian:
//!
//! ```text
//! magic  4 bytes  "VFM1"
//! T      u32      frame count, ≥ 1
//! D      u32      feature width, ≥ 1
//! data   T×D f32  row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const VFM_MAGIC: &[u8; 4] = b"VFM1";

const HEADER: usize = 12;

/// Values are narrowed to `f32`.
pub fn write_features(feats: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * feats.data().len());
    out.extend_from_slice(VFM_MAGIC);
    out.extend_from_slice(&(feats.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(feats.cols() as u32).to_le_bytes());
    for &v in feats.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn read_features(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 4 || &bytes[..4] != VFM_MAGIC {
        return Err(Error::format(0, "bad magic, not a VFM1 feature file"));
    }
    if bytes.len() < HEADER {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (t, d) = (u32_at(4), u32_at(8));
    if t == 0 {
        return Err(Error::format(4, "frame count must be at least 1"));
    }
    if d == 0 {
        return Err(Error::format(8, "feature width must be at least 1"));
    }
    let body = bytes.len() - HEADER;
    let expected = t.checked_mul(d).and_then(|n| n.checked_mul(4));
    if expected != Some(body) {
        let rows_present = body / (4 * d);
        return Err(Error::format(
            (HEADER + body.min(expected.unwrap_or(usize::MAX))) as u64,
            format!("header declares {t}x{d} but the payload holds {body} bytes ({rows_present} full rows)"),
        ));
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::from_vec(t, d, data)
}

pub fn save_features(path: impl AsRef<Path>, feats: &Matrix) -> Result<()> {
    if feats.rows() == 0 || feats.cols() == 0 {
        return Err(Error::Argument(format!(
            "feature matrix must be non-empty, got {}x{}",
            feats.rows(),
            feats.cols()
        )));
    }
    fs::write(path, write_features(feats))?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Matrix> {
    read_features(&fs::read(path)?)
}
