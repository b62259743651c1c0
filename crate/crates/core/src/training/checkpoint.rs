//! Checkpoint serialization.
//!
//! Layout: magic `FGL1`, a little-endian u32 format version, a
//! length-prefixed UTF-8 JSON metadata block, a tensor count, then one
//! record per tensor (length-prefixed name, rank, dims as little-endian
//! u64, raw little-endian f32 data). Parameters are stored under their
//! plain names, optimizer moments under `adam.m.<name>` / `adam.v.<name>`.
//!
//! Everything that feeds the byte stream is ordered (struct fields, sorted
//! tensor maps), so save → load → save reproduces the file byte for byte.
//! The metadata records the master seed; combined with the derived-stream
//! RNG discipline that is the complete random state of a run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainError, TrainPlan, TrainState, io_err};
use crate::model::{ModelParameters, TransformerConfig, parameter_shapes};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FGL1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer scalars stored in the metadata block; the moment tensors live
/// in the record section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: crate::tensor::Real> From<&AdamState<F>> for AdamMeta {
    fn from(state: &AdamState<F>) -> Self {
        Self {
            step: state.step_count(),
            beta1: state.beta1(),
            beta2: state.beta2(),
            eps: state.eps(),
        }
    }
}

/// JSON metadata block: everything needed to resume or audit a run apart
/// from the tensors themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TransformerConfig,
    pub plan: TrainPlan,
    pub epoch: usize,
    pub step: u64,
    pub vocab_checksum: String,
    pub rng_seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub train_state: TrainState,
    pub adam: Option<AdamMeta>,
}

/// A complete training snapshot: metadata, parameters, and (for resumable
/// checkpoints) optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParameters<f32>,
    pub adam: Option<AdamState<f32>>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_record(buf: &mut Vec<u8>, name: &str, tensor: &Matrix<f32>) {
    push_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    push_u64(buf, 2);
    push_u64(buf, tensor.rows() as u64);
    push_u64(buf, tensor.cols() as u64);
    for &x in tensor.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize a checkpoint to `path`, replacing any existing file.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), TrainError> {
    match (&checkpoint.meta.adam, &checkpoint.adam) {
        (None, None) => {}
        (Some(meta), Some(state)) => {
            if *meta != AdamMeta::from(state) {
                return Err(TrainError::InconsistentCheckpoint(
                    "optimizer metadata disagrees with the optimizer state".into(),
                ));
            }
        }
        _ => {
            return Err(TrainError::InconsistentCheckpoint(
                "optimizer state and metadata must be present together".into(),
            ));
        }
    }

    let meta = serde_json::to_vec(&checkpoint.meta)
        .map_err(|e| TrainError::InconsistentCheckpoint(format!("metadata serialization: {e}")))?;
    let param_count = checkpoint.params.len() as u64;
    let tensor_count = match &checkpoint.adam {
        Some(_) => param_count * 3,
        None => param_count,
    };

    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u64(&mut buf, meta.len() as u64);
    buf.extend_from_slice(&meta);
    push_u64(&mut buf, tensor_count);
    for (name, tensor) in checkpoint.params.iter() {
        push_record(&mut buf, name, tensor);
    }
    if let Some(adam) = &checkpoint.adam {
        for (name, tensor) in adam.first_moments() {
            push_record(&mut buf, &format!("adam.m.{name}"), tensor);
        }
        for (name, tensor) in adam.second_moments() {
            push_record(&mut buf, &format!("adam.v.{name}"), tensor);
        }
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TrainError::CorruptCheckpoint("unexpected end of file".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_prefixed(&mut self) -> Result<&'a [u8], TrainError> {
        let len = self.u64()?;
        let len = usize::try_from(len)
            .map_err(|_| TrainError::CorruptCheckpoint("length prefix overflows".into()))?;
        self.take(len)
    }

    fn exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_record(r: &mut Reader) -> Result<(String, Matrix<f32>), TrainError> {
    let name = std::str::from_utf8(r.len_prefixed()?)
        .map_err(|_| TrainError::CorruptCheckpoint("tensor name is not UTF-8".into()))?
        .to_string();
    let rank = r.u64()?;
    if rank != 2 {
        return Err(TrainError::CorruptCheckpoint(format!(
            "tensor {name:?} has rank {rank}, expected 2"
        )));
    }
    let rows = usize::try_from(r.u64()?)
        .map_err(|_| TrainError::CorruptCheckpoint("dimension overflows".into()))?;
    let cols = usize::try_from(r.u64()?)
        .map_err(|_| TrainError::CorruptCheckpoint("dimension overflows".into()))?;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| TrainError::CorruptCheckpoint("dimension overflows".into()))?;
    let raw = r.take(count * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Matrix::from_vec(rows, cols, data)))
}

/// Deserialize a checkpoint, verifying the container structure and that the
/// stored tensors exactly match the shapes implied by the stored config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::UnsupportedVersion(version));
    }
    let meta: CheckpointMeta = serde_json::from_slice(r.len_prefixed()?)
        .map_err(|e| TrainError::CorruptCheckpoint(format!("metadata: {e}")))?;

    let tensor_count = r.u64()?;
    let mut params = BTreeMap::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    for _ in 0..tensor_count {
        let (name, tensor) = read_record(&mut r)?;
        let (bucket, key) = if let Some(rest) = name.strip_prefix("adam.m.") {
            (&mut adam_m, rest.to_string())
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            (&mut adam_v, rest.to_string())
        } else {
            (&mut params, name.clone())
        };
        if bucket.insert(key, tensor).is_some() {
            return Err(TrainError::CorruptCheckpoint(format!(
                "duplicate tensor {name:?}"
            )));
        }
    }
    if !r.exhausted() {
        return Err(TrainError::CorruptCheckpoint(
            "trailing data after the last tensor".into(),
        ));
    }

    let expected = parameter_shapes(&meta.config);
    for (name, &(rows, cols)) in &expected {
        let tensor = params
            .get(name)
            .ok_or_else(|| TrainError::MissingTensor { name: name.clone() })?;
        if tensor.rows() != rows || tensor.cols() != cols {
            return Err(TrainError::ShapeMismatch {
                name: name.clone(),
                expected: (rows, cols),
                actual: (tensor.rows(), tensor.cols()),
            });
        }
    }
    if params.len() != expected.len() {
        let extra = params
            .keys()
            .find(|k| !expected.contains_key(*k))
            .cloned()
            .unwrap_or_default();
        return Err(TrainError::CorruptCheckpoint(format!(
            "unexpected tensor {extra:?}"
        )));
    }

    let adam = match &meta.adam {
        Some(adam_meta) => {
            for (label, moments) in [("adam.m", &adam_m), ("adam.v", &adam_v)] {
                if !moments.keys().eq(params.keys()) {
                    return Err(TrainError::CorruptCheckpoint(format!(
                        "{label} tensors do not mirror the parameters"
                    )));
                }
                for (name, tensor) in moments.iter() {
                    let p = &params[name];
                    if tensor.rows() != p.rows() || tensor.cols() != p.cols() {
                        return Err(TrainError::ShapeMismatch {
                            name: format!("{label}.{name}"),
                            expected: (p.rows(), p.cols()),
                            actual: (tensor.rows(), tensor.cols()),
                        });
                    }
                }
            }
            Some(AdamState::from_parts(
                adam_m,
                adam_v,
                adam_meta.step,
                adam_meta.beta1,
                adam_meta.beta2,
                adam_meta.eps,
            ))
        }
        None => {
            if !adam_m.is_empty() || !adam_v.is_empty() {
                return Err(TrainError::CorruptCheckpoint(
                    "optimizer tensors present without optimizer metadata".into(),
                ));
            }
            None
        }
    };

    Ok(Checkpoint {
        meta,
        params: ModelParameters::from_tensors(params),
        adam,
    })
}

/// Extract parameters from a checkpoint for a warm start (standard
/// finetuning, mix-review, or the reference copy for parameter-space
/// regularization), verifying vocabulary and model-shape compatibility.
pub fn warm_start(
    checkpoint: &Checkpoint,
    vocab_checksum: &str,
    config: &TransformerConfig,
) -> Result<ModelParameters<f32>, TrainError> {
    if checkpoint.meta.vocab_checksum != vocab_checksum {
        return Err(TrainError::VocabChecksumMismatch {
            run: vocab_checksum.to_string(),
            checkpoint: checkpoint.meta.vocab_checksum.clone(),
        });
    }
    if checkpoint.meta.config != *config {
        return Err(TrainError::ConfigMismatch);
    }
    Ok(checkpoint.params.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GradientSet, init_parameters};
    use crate::training::test_support::{test_plan, tiny_config};
    use crate::training::{Strategy, adam_step};

    fn sample_checkpoint() -> Checkpoint {
        let config = tiny_config();
        let mut params: ModelParameters<f32> = init_parameters(&config, 11).unwrap();
        let mut adam = AdamState::new(&params);
        // A couple of optimizer steps so the moment tensors are nonzero.
        let mut grads = GradientSet::zeros_like(&params);
        let shapes: Vec<(String, usize, usize)> = params
            .iter()
            .map(|(name, t)| (name.clone(), t.rows(), t.cols()))
            .collect();
        for (name, rows, cols) in shapes {
            *grads.get_mut(&name).unwrap() =
                Matrix::from_fn(rows, cols, |i, j| 0.01 * (i + 2 * j + 1) as f32);
        }
        adam_step(&mut params, &grads, &mut adam, 1e-3).unwrap();
        adam_step(&mut params, &grads, &mut adam, 1e-3).unwrap();

        let meta = CheckpointMeta {
            config,
            plan: test_plan(Strategy::StandardFinetune),
            epoch: 3,
            step: 42,
            vocab_checksum: "abc123".into(),
            rng_seed: 7,
            metrics: [("valid".to_string(), 12.5), ("pretrain-valid".to_string(), 30.25)]
                .into_iter()
                .collect(),
            train_state: TrainState {
                current_lr: 5e-4,
                best_valid_ppl: Some(12.5),
                epochs_without_improvement: 1,
            },
            adam: Some(AdamMeta::from(&adam)),
        };
        Checkpoint {
            meta,
            params,
            adam: Some(adam),
        }
    }

    #[test]
    fn round_trip_preserves_everything_and_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let original = sample_checkpoint();
        save_checkpoint(&path, &original).unwrap();
        let first_bytes = std::fs::read(&path).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, original);

        let resaved = dir.path().join("resaved.ckpt");
        save_checkpoint(&resaved, &loaded).unwrap();
        assert_eq!(std::fs::read(&resaved).unwrap(), first_bytes);
    }

    #[test]
    fn round_trip_without_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.ckpt");
        let mut ck = sample_checkpoint();
        ck.adam = None;
        ck.meta.adam = None;
        save_checkpoint(&path, &ck).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ck);
        assert!(loaded.adam.is_none());
    }

    #[test]
    fn truncation_is_reported_as_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.ckpt");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for keep in [bytes.len() - 3, bytes.len() / 2, 20] {
            std::fs::write(&path, &bytes[..keep]).unwrap();
            let err = load_checkpoint(&path).unwrap_err();
            assert!(
                matches!(err, TrainError::CorruptCheckpoint(_)),
                "kept {keep} bytes, got {err}"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fat.ckpt");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"junk");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn magic_and_version_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.ckpt");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::BadMagic)));

        let mut bad_version = good;
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn warm_start_guards_vocab_and_config() {
        let ck = sample_checkpoint();
        let config = ck.meta.config.clone();

        let params = warm_start(&ck, "abc123", &config).unwrap();
        assert_eq!(params, ck.params);

        assert!(matches!(
            warm_start(&ck, "different", &config),
            Err(TrainError::VocabChecksumMismatch { .. })
        ));

        let mut other = config;
        other.d_ff *= 2;
        assert!(matches!(
            warm_start(&ck, "abc123", &other),
            Err(TrainError::ConfigMismatch)
        ));
    }

    #[test]
    fn inconsistent_in_memory_checkpoints_cannot_be_saved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let mut ck = sample_checkpoint();
        ck.meta.adam = None;
        assert!(matches!(
            save_checkpoint(&path, &ck),
            Err(TrainError::InconsistentCheckpoint(_))
        ));
        assert!(!path.exists());
    }
}
