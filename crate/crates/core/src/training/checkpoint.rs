//! Binary checkpoint: magic, version, JSON header, little-endian f64
//! payload, SHA-256 trailer over everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, AdamHyper, TrainState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    fingerprint: String,
    epoch: u64,
    step: u64,
    rng: ChaCha8Rng,
    adam: AdamHyper,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let store = &state.model.store;
    let header = Header {
        model: state.model.cfg.clone(),
        fingerprint: state.model.cfg.fingerprint(),
        epoch: state.epoch,
        step: state.step,
        rng: state.rng.clone(),
        adam: state.adam.hyper(),
        adam_t: state.adam.t,
        tensors: store
            .iter()
            .map(|(_, n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 24 * store.count() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (id, _, t) in store.iter() {
        for src in [t, &state.adam.m[id.index()], &state.adam.v[id.index()]] {
            for v in src.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&buf)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Restores a full training state. When `expected` is given, its
/// architecture fingerprint must match the stored one.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 12 + DIGEST_LEN || &buf[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let body_len = buf.len() - DIGEST_LEN;
    if Sha256::digest(&buf[..body_len]).as_slice() != &buf[body_len..] {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize.checked_add(hlen).filter(|&e| e <= body_len).ok_or_else(|| corrupt("header length"))?;
    let header: Header = serde_json::from_slice(&buf[20..hend]).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.fingerprint != header.model.fingerprint() {
        return Err(corrupt("stored fingerprint does not match stored config"));
    }
    if let Some(cfg) = expected {
        if cfg.fingerprint() != header.fingerprint {
            return Err(Error::ConfigMismatch {
                found: header.fingerprint,
                expected: cfg.fingerprint(),
            });
        }
    }

    let mut model = Model::new(&header.model)?;
    let mut adam = Adam::new(&model.store, header.adam);
    adam.t = header.adam_t;
    let mut pos = hend;
    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let end = pos + 8 * n;
        if end > body_len {
            return Err(corrupt("payload truncated"));
        }
        let data = buf[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos = end;
        Tensor::from_vec(shape, data)
    };
    if header.tensors.len() != model.store.len() {
        return Err(corrupt("tensor count does not match the architecture"));
    }
    for entry in &header.tensors {
        let id = model
            .store
            .lookup(&entry.name)
            .ok_or_else(|| corrupt(format!("unknown tensor {}", entry.name)))?;
        if model.store.get(id).shape() != entry.shape.as_slice() {
            return Err(corrupt(format!("tensor {} has shape {:?}", entry.name, entry.shape)));
        }
        *model.store.get_mut(id) = take(&entry.shape)?;
        adam.m[id.index()] = take(&entry.shape)?;
        adam.v[id.index()] = take(&entry.shape)?;
    }
    if pos != body_len {
        return Err(corrupt("trailing bytes in payload"));
    }
    Ok(TrainState {
        model,
        adam,
        epoch: header.epoch,
        step: header.step,
        rng: header.rng,
    })
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;
    use crate::training::TrainConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            base_channels: 2,
            heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainState::new(&small(), &TrainConfig::default()).unwrap();
        state.rng.next_u64();
        state.step = 7;
        state.adam.t = 7;
        state.adam.m[3].data_mut()[0] = 0.125;
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &state).unwrap();
        let back = load_checkpoint(&path, Some(&small())).unwrap();
        assert_eq!(back.adam, state.adam);
        assert_eq!(back.step, 7);
        assert_eq!(back.rng, state.rng);
        for ((_, _, a), (_, _, b)) in back.model.store.iter().zip(state.model.store.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corruption_and_mismatch_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState::new(&small(), &TrainConfig::default()).unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &state).unwrap();
        let other = ModelConfig {
            base_channels: 4,
            ..small()
        };
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(Error::ConfigMismatch { .. })
        ));
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::CorruptCheckpoint(_))));
        bytes[mid] ^= 0xff;
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }
}
