//! Checkpoints: every parameter (and the memory) as concatenated `MCT1`
//! tensors, plus a JSON sidecar with offsets and training state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::memory::FeatureMemory;
use crate::model::SegModel;
use crate::numerics::io::{read_tensor, write_tensor, Cursor};
use crate::numerics::{Precision, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub tensors: Vec<TensorEntry>,
    pub update_count: u64,
    pub iteration: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub in_channels: usize,
    /// Metric CSV rows written so far, so a resumed run reproduces the full file.
    pub metrics: Vec<String>,
    pub memory_log: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(
    path: &Path,
    model: &SegModel,
    cfg: &TrainConfig,
    iteration: u64,
    metrics: &[String],
    memory_log: &[String],
) -> Result<()> {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut copy = model.clone();
    copy.visit_params_mut(&mut |name, p| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            offset: bytes.len() as u64,
            shape: p.shape().to_vec(),
        });
        write_tensor(&mut bytes, &p.value, Precision::F64);
    });
    let manifest = CheckpointManifest {
        tensors,
        update_count: model.memory().map_or(0, FeatureMemory::update_count),
        iteration,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        in_channels: model.config.in_channels,
        metrics: metrics.to_vec(),
        memory_log: memory_log.to_vec(),
    };
    std::fs::write(path, bytes)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint, rebuilding the model from the stored config.
pub fn load_checkpoint(path: &Path) -> Result<(SegModel, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Validation("checkpoint config does not match its recorded hash".into()));
    }
    let bytes = std::fs::read(path)?;
    let mut model = SegModel::new(manifest.config.model_config(manifest.in_channels), manifest.config.seed)?;
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let mut cur = Cursor::at(&bytes, e.offset as usize, "checkpoint");
        let (t, _) = read_tensor(&mut cur)?;
        if t.shape() != e.shape.as_slice() {
            return Err(cur.fail(format!("tensor {} has shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape)));
        }
        loaded.push((e.name.clone(), t));
    }
    let mut missing = Vec::new();
    let mut used = 0;
    model.visit_params_mut(&mut |name, p| match loaded.iter().find(|(n, _)| n == name) {
        Some((_, t)) if t.shape() == p.shape() => {
            p.value = t.clone();
            used += 1;
        }
        _ => missing.push(name.to_string()),
    });
    if !missing.is_empty() || used != loaded.len() {
        return Err(Error::Validation(format!(
            "checkpoint does not match the model: missing or mismatched {missing:?}"
        )));
    }
    if let Some(mem) = model.memory().cloned() {
        model.set_memory(FeatureMemory::with_count(mem.values().clone(), manifest.update_count)?)?;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::FusionMode;

    #[test]
    fn round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            num_classes: 3,
            channels: 4,
            blocks: 2,
            fusion: FusionMode::WeightedAdd,
            use_within_image: true,
            ..TrainConfig::default()
        };
        let model = SegModel::new(cfg.model_config(2), 9).unwrap();
        let path = dir.path().join("ck.mct");
        save_checkpoint(&path, &model, &cfg, 7, &["0,1,2".into()], &[]).unwrap();
        let (back, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(manifest.iteration, 7);
        assert_eq!(manifest.metrics, vec!["0,1,2".to_string()]);
        let x = Tensor::full(&[2, 4, 4], 0.3);
        assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
        let first = &manifest.tensors[0];
        assert_eq!(first.offset, 0);
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"MCT1");
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { num_classes: 2, channels: 2, blocks: 1, ..TrainConfig::default() };
        let model = SegModel::new(cfg.model_config(1), 1).unwrap();
        let path = dir.path().join("ck.mct");
        save_checkpoint(&path, &model, &cfg, 0, &[], &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().is_validation());
    }
}
