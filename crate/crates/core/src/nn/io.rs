//! `NFWT` weight files: magic, version, architecture digest, then every
//! tensor as little-endian `f32` in declaration order.

use std::path::Path;

use super::model::ModelWeights;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NFWT";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 32;

pub fn save_weights(path: &Path, weights: &ModelWeights, digest: &[u8; 32]) -> Result<()> {
    let count: usize = weights.tensors.iter().map(|t| t.data.len()).sum();
    let mut buf = Vec::with_capacity(HEADER + 4 * count);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(digest);
    for t in &weights.tensors {
        for v in &t.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Fills `weights` (shaped by the architecture) from `path`.
pub fn load_weights(path: &Path, weights: &mut ModelWeights, digest: &[u8; 32]) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), hint: "run `nearfocus train` first".into() });
    }
    let bytes = std::fs::read(path)?;
    let bad = |detail: String| Error::Format { path: path.to_path_buf(), detail };
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(bad("missing NFWT header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if &bytes[8..40] != digest {
        return Err(bad("architecture digest does not match the configured model".into()));
    }
    let count: usize = weights.tensors.iter().map(|t| t.data.len()).sum();
    if bytes.len() != HEADER + 4 * count {
        return Err(bad(format!("expected {count} values, file holds {}", (bytes.len() - HEADER) / 4)));
    }
    let mut vals = bytes[HEADER..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    for t in &mut weights.tensors {
        for v in &mut t.data {
            *v = vals.next().expect("length checked");
        }
    }
    Ok(())
}
