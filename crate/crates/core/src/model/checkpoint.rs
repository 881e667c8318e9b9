//! Checkpoint format: an 8-byte magic, a little-endian u64 metadata length,
//! a JSON metadata block, and a raw little-endian tensor blob. Loading is
//! bit-exact; any manifest/blob inconsistency is an integrity error rather
//! than a crash.

use super::{SurformerModel, TactileBranchConfig, VisionBranchConfig};
use crate::data::Preprocess;
use crate::features::{FeatureNormalizer, FEATURE_NAMES};
use crate::tensor::{Dtype, Scalar, TensorError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFCKPT1\n";

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    /// Manifest and blob disagree (lengths, offsets, missing params).
    Integrity(String),
    /// Metadata is unreadable or from an incompatible version/dtype.
    Meta(String),
    Model(TensorError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Integrity(m) => write!(f, "checkpoint integrity error: {m}"),
            CheckpointError::Meta(m) => write!(f, "checkpoint metadata error: {m}"),
            CheckpointError::Model(e) => write!(f, "checkpoint model error: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<TensorError> for CheckpointError {
    fn from(e: TensorError) -> Self {
        CheckpointError::Model(e)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length in the blob.
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub dtype: Dtype,
    pub train_seed: u64,
    pub classes: Vec<String>,
    pub vision_config: VisionBranchConfig,
    pub tactile_config: TactileBranchConfig,
    pub feature_order: Vec<String>,
    pub normalizer: FeatureNormalizer,
    pub preprocess: Preprocess,
    pub params: Vec<ParamEntry>,
    pub blob_len: u64,
}

/// Everything a checkpoint restores.
pub struct LoadedCheckpoint<S: Scalar> {
    pub model: SurformerModel<S>,
    pub normalizer: FeatureNormalizer,
    pub preprocess: Preprocess,
    pub classes: Vec<String>,
    pub train_seed: u64,
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &SurformerModel<S>,
    normalizer: &FeatureNormalizer,
    preprocess: &Preprocess,
    classes: &[String],
    train_seed: u64,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (_, p) in model.store.iter() {
        let offset = blob.len() as u64;
        for &v in p.tensor.data() {
            v.write_le(&mut blob);
        }
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    let meta = CheckpointMeta {
        format: "surfuse.checkpoint".into(),
        version: 1,
        dtype: S::DTYPE,
        train_seed,
        classes: classes.to_vec(),
        vision_config: model.vision_cfg.clone(),
        tactile_config: model.tactile_cfg.clone(),
        feature_order: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        normalizer: normalizer.clone(),
        preprocess: preprocess.clone(),
        params: entries,
        blob_len: blob.len() as u64,
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(meta_json.len() as u64).to_le_bytes())?;
    file.write_all(&meta_json)?;
    file.write_all(&blob)?;
    Ok(())
}

/// Parse only the metadata block.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Integrity("file shorter than the magic header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Meta("not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| CheckpointError::Integrity("truncated metadata length".into()))?;
    let meta_len = u64::from_le_bytes(len_bytes) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    file.read_exact(&mut meta_buf)
        .map_err(|_| CheckpointError::Integrity("truncated metadata block".into()))?;
    serde_json::from_slice(&meta_buf).map_err(|e| CheckpointError::Meta(e.to_string()))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<LoadedCheckpoint<S>, CheckpointError> {
    let mut file = std::fs::File::open(path)?;
    let mut all = Vec::new();
    file.read_to_end(&mut all)?;
    if all.len() < 16 || &all[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Meta("not a checkpoint file".into()));
    }
    let meta_len = u64::from_le_bytes(all[8..16].try_into().unwrap()) as usize;
    let meta_end = 16usize
        .checked_add(meta_len)
        .filter(|&e| e <= all.len())
        .ok_or_else(|| CheckpointError::Integrity("truncated metadata block".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&all[16..meta_end])
        .map_err(|e| CheckpointError::Meta(e.to_string()))?;

    if meta.format != "surfuse.checkpoint" || meta.version != 1 {
        return Err(CheckpointError::Meta(format!(
            "unsupported checkpoint format {:?} v{}",
            meta.format, meta.version
        )));
    }
    if meta.dtype != S::DTYPE {
        return Err(CheckpointError::Meta(format!(
            "checkpoint dtype {} does not match requested {}",
            meta.dtype.name(),
            S::DTYPE.name()
        )));
    }
    let expected_order: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    if meta.feature_order != expected_order {
        return Err(CheckpointError::Meta(format!(
            "unknown tactile feature order {:?}",
            meta.feature_order
        )));
    }

    let blob = &all[meta_end..];
    if blob.len() as u64 != meta.blob_len {
        return Err(CheckpointError::Integrity(format!(
            "blob is {} bytes but manifest declares {}",
            blob.len(),
            meta.blob_len
        )));
    }

    let mut model = SurformerModel::<S>::new(
        meta.vision_config.clone(),
        meta.tactile_config.clone(),
        0,
    )?;
    let elem = S::DTYPE.size_bytes();
    if meta.params.len() != model.store.len() {
        return Err(CheckpointError::Integrity(format!(
            "manifest has {} parameters, the configured model has {}",
            meta.params.len(),
            model.store.len()
        )));
    }
    for entry in &meta.params {
        let pid = model.store.by_name(&entry.name).ok_or_else(|| {
            CheckpointError::Integrity(format!("unknown parameter {:?}", entry.name))
        })?;
        let param = model.store.get_mut(pid);
        if param.tensor.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Integrity(format!(
                "parameter {:?} has shape {:?} in the manifest but {:?} in the model",
                entry.name,
                entry.shape,
                param.tensor.shape()
            )));
        }
        let count = param.tensor.numel();
        if entry.byte_len as usize != count * elem {
            return Err(CheckpointError::Integrity(format!(
                "parameter {:?} declares {} bytes, expected {}",
                entry.name,
                entry.byte_len,
                count * elem
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > blob.len() {
            return Err(CheckpointError::Integrity(format!(
                "parameter {:?} extends past the blob",
                entry.name
            )));
        }
        for (i, chunk) in blob[start..end].chunks_exact(elem).enumerate() {
            param.tensor.data_mut()[i] = S::read_le(chunk);
        }
    }

    Ok(LoadedCheckpoint {
        model,
        normalizer: meta.normalizer,
        preprocess: meta.preprocess,
        classes: meta.classes,
        train_seed: meta.train_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_configs;

    fn sample_model(seed: u64) -> SurformerModel<f32> {
        let (v, t) = tiny_configs(3);
        SurformerModel::new(v, t, seed).unwrap()
    }

    fn sample_normalizer() -> FeatureNormalizer {
        FeatureNormalizer {
            mean: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            std: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
            n_fitted: 42,
            cap: 1000,
            seed: 9,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = sample_model(3);
        let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        save_checkpoint(
            &path,
            &model,
            &sample_normalizer(),
            &Preprocess::default(),
            &classes,
            7,
        )
        .unwrap();
        let first = std::fs::read(&path).unwrap();

        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.classes, classes);
        assert_eq!(loaded.train_seed, 7);
        assert_eq!(loaded.normalizer, sample_normalizer());
        for ((_, a), (_, b)) in model.store.iter().zip(loaded.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }

        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(
            &path2,
            &loaded.model,
            &loaded.normalizer,
            &loaded.preprocess,
            &loaded.classes,
            loaded.train_seed,
        )
        .unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second, "save→load→save must reproduce bytes");
    }

    #[test]
    fn truncated_blob_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(
            &path,
            &sample_model(1),
            &sample_normalizer(),
            &Preprocess::default(),
            &["a".into(), "b".into(), "c".into()],
            1,
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(CheckpointError::Integrity(_)) => {}
            Err(other) => panic!("expected integrity error, got {other:?}"),
            Ok(_) => panic!("expected integrity error, got a loaded model"),
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(
            &path,
            &sample_model(1),
            &sample_normalizer(),
            &Preprocess::default(),
            &["a".into(), "b".into(), "c".into()],
            1,
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(CheckpointError::Meta(_))
        ));
        assert_eq!(read_meta(&path).unwrap().dtype, Dtype::F32);
    }

    #[test]
    fn garbage_file_is_not_a_crash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}

#[cfg(test)]
mod trained_roundtrip {
    use super::*;
    use crate::data::{stratified_split, synth_generate, Preprocess, SynthSpec};
    use crate::model::{tiny_configs, ConvStage};
    use crate::train::{fit, TrainConfig};

    /// Fitted normalizer statistics and trained weights carry arbitrary bit
    /// patterns; the round-trip must survive them exactly (this is what the
    /// serde_json `float_roundtrip` feature is for).
    #[test]
    fn trained_state_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_generate(&SynthSpec::new(3, 12, 5)).unwrap();
        let (train_set, _) = stratified_split(&manifest, 0.8, 5).unwrap();
        let (mut vcfg, tcfg) = tiny_configs(3);
        vcfg.input_hw = 32;
        vcfg.stages = vec![ConvStage {
            out_channels: 8,
            kernel: 3,
            stride: 2,
            norm: true,
        }];
        vcfg.feature_dim = 32;
        let pp = Preprocess {
            size: 32,
            ..Preprocess::default()
        };
        let cfg = TrainConfig {
            lr_vision: 1e-3,
            max_epochs: 1,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut model = crate::model::SurformerModel::<f32>::new(vcfg, tcfg, 5).unwrap();
        let result = fit(&mut model, &train_set, &cfg, &pp).unwrap();
        let p1 = dir.path().join("a.ckpt");
        save_checkpoint(&p1, &model, &result.normalizer, &pp, &manifest.classes, 5).unwrap();
        let loaded = load_checkpoint::<f32>(&p1).unwrap();
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(
            &p2,
            &loaded.model,
            &loaded.normalizer,
            &loaded.preprocess,
            &loaded.classes,
            loaded.train_seed,
        )
        .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
