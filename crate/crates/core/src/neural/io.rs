//! Weight files.
//!
//! ```text
//! magic "FFW1" | version u16 | scalar bits u8 | reserved u8 | descriptor_len u32
//! descriptor              JSON {arch, stats, tensors: [[name, len], ...]}
//! param_count u64 | params param_count x f64
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::NormStats;
use super::model::{Architecture, SurrogateWeights};
use crate::error::{Error, Result};
use crate::num::Real;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"FFW1";
pub const WEIGHTS_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: Architecture,
    stats: NormStats,
    tensors: Vec<(String, usize)>,
}

pub fn weights_to_bytes<T: Real>(weights: &SurrogateWeights<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut params = Vec::new();
    weights.visit(&mut |name, p| {
        tensors.push((name, p.len()));
        params.extend(p.iter().map(|v| v.as_f64()));
    });
    let descriptor = serde_json::to_vec(&Descriptor { arch: weights.arch.clone(), stats: weights.stats.clone(), tensors })?;
    let mut out = Vec::with_capacity(20 + descriptor.len() + params.len() * 8);
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.push(T::BITS);
    out.push(0);
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(&descriptor);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn weights_from_bytes<T: Real>(bytes: &[u8]) -> Result<SurrogateWeights<T>> {
    if bytes.len() < 12 || bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weights file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let dlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let dend = 12usize.checked_add(dlen).filter(|&e| e + 8 <= bytes.len()).ok_or_else(|| {
        Error::Corrupt(format!("descriptor length {dlen} exceeds file size {}", bytes.len()))
    })?;
    let descriptor: Descriptor =
        serde_json::from_slice(&bytes[12..dend]).map_err(|e| Error::Corrupt(format!("bad descriptor: {e}")))?;
    let count = u64::from_le_bytes(bytes[dend..dend + 8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[dend + 8..];
    if count.checked_mul(8) != Some(body.len()) {
        return Err(Error::Corrupt(format!("{count} parameters declared, {} bytes present", body.len())));
    }
    let mut weights = SurrogateWeights::<T>::zeros(descriptor.arch, descriptor.stats);
    let mut layout = Vec::new();
    weights.visit(&mut |name, p| layout.push((name, p.len())));
    if layout != descriptor.tensors {
        return Err(Error::Incompatible("tensor layout does not match the architecture".into()));
    }
    let mut values = body.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
    weights.visit_mut(&mut |_, p| {
        for x in p.iter_mut() {
            *x = values.next().expect("length checked");
        }
    });
    Ok(weights)
}

pub fn save_weights<T: Real>(weights: &SurrogateWeights<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, weights_to_bytes(weights)?)?;
    Ok(())
}

pub fn load_weights<T: Real>(path: impl AsRef<Path>) -> Result<SurrogateWeights<T>> {
    weights_from_bytes(&fs::read(path)?)
}

/// Loads weights and checks they fit a `dim`-dimensional session.
pub fn load_weights_for<T: Real>(path: impl AsRef<Path>, dim: usize) -> Result<SurrogateWeights<T>> {
    let w = load_weights(path)?;
    w.ensure_dim(dim)?;
    Ok(w)
}
