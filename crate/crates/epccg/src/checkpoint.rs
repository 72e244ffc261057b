//! Checkpoint file format:
//!   magic "EPCK" | u32 version (LE) | u64 header length (LE) | JSON header |
//!   little-endian float32 tensors, row-major, in header-table order.
//!
//! The header carries the model config, training metadata, step counter and
//! rng state, plus a named tensor table (shapes and byte offsets into the
//! data section). Parameter tensors come first, then Adam moments under
//! `adam_m.` / `adam_v.` prefixes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::num::Scalar;
use crate::train::{ModelMeta, TrainState};

const MAGIC: &[u8; 4] = b"EPCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: ModelMeta,
    step: u64,
    rng_seed: Vec<u8>,
    rng_word_pos: String,
    tensors: Vec<TensorEntry>,
}

fn named_tensors<'a, F: Scalar>(state: &'a TrainState<F>) -> Vec<(String, &'a crate::tensor::Tensor<F>)> {
    let mut all = state.params.tensors();
    all.extend(state.adam_m.tensors().into_iter().map(|(n, t)| (format!("adam_m.{n}"), t)));
    all.extend(state.adam_v.tensors().into_iter().map(|(n, t)| (format!("adam_v.{n}"), t)));
    all
}

pub fn save_checkpoint<F: Scalar>(state: &TrainState<F>, path: &Path) -> Result<()> {
    let tensors = named_tensors(state);
    let mut table = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        table.push(TensorEntry { name: name.clone(), rows: t.rows, cols: t.cols, offset });
        offset += (t.data.len() * 4) as u64;
    }
    let header = Header {
        config: state.config.clone(),
        meta: state.meta.clone(),
        step: state.step,
        rng_seed: state.rng.get_seed().to_vec(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        tensors: table,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in &tensors {
        for &x in &t.data {
            out.extend_from_slice(&x.to_f32().to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<TrainState<F>> {
    let bytes = fs::read(path)?;
    let fail = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| fail(format!("bad header: {e}")))?;
    header.config.validate().map_err(|e| fail(format!("bad config: {e}")))?;

    let mut state = TrainState::<F>::new(header.config.clone())
        .map_err(|e| fail(format!("cannot build state: {e}")))?;
    state.step = header.step;
    state.meta = header.meta.clone();
    let seed: [u8; 32] = header
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| fail("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 =
        header.rng_word_pos.parse().map_err(|_| fail("bad rng word position".into()))?;
    state.rng = ChaCha8Rng::from_seed(seed);
    state.rng.set_word_pos(word_pos);

    // The expected table is derived from the config; any disagreement with
    // the header (renamed tensors, reshaped tensors, wrong vocab size) fails.
    let data = &bytes[16 + header_len..];
    {
        let mut expected = state.params.tensors_mut();
        expected.extend(
            state.adam_m.tensors_mut().into_iter().map(|(n, t)| (format!("adam_m.{n}"), t)),
        );
        expected.extend(
            state.adam_v.tensors_mut().into_iter().map(|(n, t)| (format!("adam_v.{n}"), t)),
        );
        if expected.len() != header.tensors.len() {
            return Err(fail(format!(
                "tensor table has {} entries, config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for ((name, tensor), entry) in expected.into_iter().zip(&header.tensors) {
            if name != entry.name || tensor.rows != entry.rows || tensor.cols != entry.cols {
                return Err(fail(format!(
                    "tensor {} has shape {}x{} in header but config implies {name} {}x{}",
                    entry.name, entry.rows, entry.cols, tensor.rows, tensor.cols
                )));
            }
            let start = entry.offset as usize;
            let len = tensor.data.len() * 4;
            if start + len > data.len() {
                return Err(fail(format!("tensor {} extends past end of file", entry.name)));
            }
            for (i, chunk) in data[start..start + len].chunks_exact(4).enumerate() {
                tensor.data[i] = F::from_f32(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, AttentionMask};
    use crate::train::{train_step, TrainExample};
    use crate::model::build_prefix_mask;
    use rand::Rng;

    fn trained_state() -> TrainState<f32> {
        let config = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 8,
            ff_size: 16,
            vocab_size: 12,
            max_positions: 10,
            dropout_prob: 0.0,
            seed: 3,
        };
        let mut state: TrainState<f32> = TrainState::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<TrainExample> = (0..2)
            .map(|_| TrainExample {
                ids: (0..6).map(|_| rng.gen_range(0..12)).collect(),
                mask: build_prefix_mask(2, 6).unwrap(),
                targets: (0..6).map(|_| rng.gen_range(0..12)).collect(),
                positions: vec![2, 4],
            })
            .collect();
        for _ in 0..3 {
            train_step(&mut state, &batch, 1e-3).unwrap();
        }
        state.meta.pattern = Some("name_code".into());
        state
    }

    #[test]
    fn roundtrip_is_bit_identical_for_f32() {
        let state = trained_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.epck");
        save_checkpoint(&state, &path).unwrap();
        let loaded: TrainState<f32> = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.params, state.params);
        assert_eq!(loaded.adam_m, state.adam_m);
        assert_eq!(loaded.step, state.step);
        assert_eq!(loaded.meta, state.meta);
        assert_eq!(loaded.rng, state.rng);

        let ids = [1u32, 3, 5, 7];
        let mask = AttentionMask::full(4);
        let a = forward(&ids, &mask, &state.params, &state.config).unwrap();
        let b = forward(&ids, &mask, &loaded.params, &loaded.config).unwrap();
        assert_eq!(a.data, b.data, "logits must be bit-identical");
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let state = trained_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.epck");
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let state = trained_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.epck");
        save_checkpoint(&state, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn header_config_mismatch_is_rejected() {
        let state = trained_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.epck");
        save_checkpoint(&state, &path).unwrap();

        // Rewrite the header with a different vocab_size; tensor shapes in the
        // table no longer match what the config implies.
        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        header.config.vocab_size += 1;
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[0..8]);
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[16 + header_len..]);
        fs::write(&path, out).unwrap();

        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
    }
}
