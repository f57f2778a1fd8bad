//! Flat binary feature cache.
//!
//! Layout (little-endian): magic `EHFB`, version `u32`, frames `u32`,
//! n_mels `u32`, then `frames * n_mels` `f64` values row-major.

use std::fs;
use std::path::Path;

use super::FeatureMatrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EHFB";
const VERSION: u32 = 1;

pub fn encode_features(f: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + f.data().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(f.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(f.n_mels() as u32).to_le_bytes());
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], fingerprint: &str) -> Result<FeatureMatrix> {
    if bytes.len() < 16 {
        return Err(Error::Truncated("feature header"));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(Error::Magic {
            what: "feature cache",
            found: magic,
        });
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let frames = word(8) as usize;
    let n_mels = word(12) as usize;
    let body = &bytes[16..];
    if body.len() != frames * n_mels * 8 {
        return Err(Error::Truncated("feature payload"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    FeatureMatrix::new(frames, n_mels, data, fingerprint.to_string())
}

pub fn write_features(path: impl AsRef<Path>, f: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>, fingerprint: &str) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, fingerprint)
}
