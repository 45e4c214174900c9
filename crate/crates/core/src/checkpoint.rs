//! Single-file checkpoint container: JSON config header plus an `f64`
//! little-endian weight blob.
//!
//! Layout: magic `MCKP`, u32 LE header length, UTF-8 JSON header, raw values.
//! The header lists parameters in name order; the blob concatenates their
//! values in that same order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::params::ParamStore;

const MAGIC: &[u8; 4] = b"MCKP";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    params: Vec<ParamMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt header: {0}")]
    BadHeader(#[from] serde_json::Error),
    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("weight blob truncated")]
    Truncated,
}

pub fn save(
    path: &Path,
    kind: &str,
    config: &serde_json::Value,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let params: Vec<ParamMeta> = store
        .iter()
        .map(|(name, p)| ParamMeta {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        })
        .collect();
    let header = Header {
        kind: kind.to_string(),
        config: config.clone(),
        params,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    let mut buf = Vec::with_capacity(store.num_values() * 8);
    for (_, p) in store.iter() {
        for v in p.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path, expected_kind: &str) -> Result<(serde_json::Value, ParamStore), CheckpointError> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.kind != expected_kind {
        return Err(CheckpointError::KindMismatch {
            expected: expected_kind.to_string(),
            found: header.kind,
        });
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    let mut store = ParamStore::new();
    let mut offset = 0usize;
    for meta in &header.params {
        let count: usize = meta.shape.iter().product();
        let end = offset + count * 8;
        if end > blob.len() {
            return Err(CheckpointError::Truncated);
        }
        let vals: Vec<f64> = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset = end;
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&meta.shape), vals)
            .expect("shape/count mismatch in checkpoint header");
        store.insert(&meta.name, arr, meta.trainable);
    }
    Ok((header.config, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn roundtrip_preserves_values_and_flags() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("a.w", randn(&mut rng, &[3, 2], 1.0), true);
        store.insert("b.w", randn(&mut rng, &[4], 1.0), false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = serde_json::json!({"hidden": 64});
        save(&path, "decoder", &cfg, &store).unwrap();
        let (cfg2, store2) = load(&path, "decoder").unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(store.value("a.w"), store2.value("a.w"));
        assert_eq!(store.value("b.w"), store2.value("b.w"));
        assert_eq!(store.frozen_hash(), store2.frozen_hash());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let store = ParamStore::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, "decoder", &serde_json::json!({}), &store).unwrap();
        assert!(matches!(
            load(&path, "engine"),
            Err(CheckpointError::KindMismatch { .. })
        ));
    }
}
