//! `SRM1` checkpoint files.
//!
//! Layout: the magic `SRM1`, a little-endian `u64` byte length, a JSON header
//! holding the config and a tensor manifest, then every tensor as raw
//! little-endian `f32` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::SrmConfig;
use crate::error::{Result, SrmError};
use crate::model::ModelParams;
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"SRM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in scalars from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: SrmConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Real>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let views = params.tensors();
    let mut offset = 0;
    let tensors = views
        .iter()
        .map(|v| {
            let e = TensorEntry {
                name: v.name.clone(),
                shape: v.shape.clone(),
                offset,
            };
            offset += v.data.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: params.config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &views {
        for x in v.data {
            out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let bad = |msg: &str| SrmError::Checkpoint(msg.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing SRM1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(12..12usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let data = &bytes[12 + hlen..];
    let mut params = ModelParams::<T>::zeros(&header.config)?;
    let mut views = params.tensors_mut();
    if views.len() != header.tensors.len() {
        return Err(SrmError::Checkpoint(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            views.len()
        )));
    }
    let mut expected_offset = 0;
    for (view, entry) in views.iter_mut().zip(&header.tensors) {
        if view.name != entry.name || view.shape != entry.shape || entry.offset != expected_offset {
            return Err(SrmError::Checkpoint(format!(
                "manifest entry {} {:?} @{} does not match expected {} {:?} @{}",
                entry.name, entry.shape, entry.offset, view.name, view.shape, expected_offset
            )));
        }
        let start = 4 * entry.offset;
        let end = start + 4 * view.data.len();
        let raw = data.get(start..end).ok_or_else(|| bad("truncated tensor data"))?;
        for (dst, chunk) in view.data.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = T::of(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
        expected_offset += view.data.len();
    }
    if data.len() != 4 * expected_offset {
        return Err(bad("trailing bytes after tensor data"));
    }
    drop(views);
    Ok(params)
}

/// Write atomically: the file is renamed into place only once complete.
pub fn save<T: Real>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(params)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_corruption() {
        let c = SrmConfig::mixed(8, 1, 2, 4);
        let p = ModelParams::<f32>::init(&c, 0).unwrap();
        let bytes = to_bytes(&p).unwrap();
        assert_eq!(from_bytes::<f32>(&bytes).unwrap(), p);
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<f32>(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(from_bytes::<f32>(&magic).is_err());
    }
}
