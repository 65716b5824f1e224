//! DSPF feature files: `"DSPF"`, three little-endian u32 extents D, H, W,
//! then D·H·W little-endian f64 values, channel-major then row-major.

use std::io::Write;
use std::path::Path;

use crate::error::{FeatureFileError, Result};
use crate::features::FeatureMap;

pub const FEATURE_MAGIC: &[u8; 4] = b"DSPF";
const HEADER_LEN: usize = 16;

pub fn write_features(mut w: impl Write, features: &FeatureMap) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    for e in [features.channels(), features.height(), features.width()] {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in features.tensor().data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features(bytes: &[u8]) -> Result<FeatureMap, FeatureFileError> {
    let mut magic = [0u8; 4];
    let head = bytes.get(..4).unwrap_or(bytes);
    magic[..head.len()].copy_from_slice(head);
    if &magic != FEATURE_MAGIC {
        return Err(FeatureFileError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureFileError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let ext = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let dims = [ext(0), ext(1), ext(2)];
    if dims.contains(&0) {
        return Err(FeatureFileError::BadExtents(dims));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e as usize))
        .and_then(|n| n.checked_mul(8))
        .ok_or(FeatureFileError::BadExtents(dims))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count {
        return Err(FeatureFileError::Truncated {
            expected: count,
            found: payload.len(),
        });
    }
    let mut data = Vec::with_capacity(count / 8);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FeatureFileError::NonFinite(i));
        }
        data.push(v);
    }
    let [d, h, w] = dims.map(|e| e as usize);
    Ok(FeatureMap::from_data(d, h, w, data).expect("extents validated above"))
}

pub fn save_features(path: &Path, features: &FeatureMap) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * features.tensor().len());
    write_features(&mut buf, features)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path)?;
    Ok(read_features(&bytes)?)
}
