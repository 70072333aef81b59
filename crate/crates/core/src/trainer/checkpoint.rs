use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::TaskModel;
use crate::backbone::AdaptedEncoder;
use crate::error::{Error, Result};
use crate::heads::{HeadShape, TaskHead};

pub const ADAPTERS_FILE: &str = "adapters.bin";
pub const HEAD_FILE: &str = "head.bin";
pub const BASE_FILE: &str = "base.bin";
pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// Metadata stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub dataset_id: String,
    pub learning_rate: f64,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub includes_base: bool,
    pub head: HeadShape,
    pub config: RunConfig,
}

/// Best-epoch weights of one training run plus its history.
#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub snapshot: Snapshot,
    pub adapters: HashMap<String, Tensor>,
    pub head: HashMap<String, Tensor>,
    /// Only present for full fine-tuning runs.
    pub base: Option<HashMap<String, Tensor>>,
    pub history: Vec<EpochRecord>,
}

fn checkpoint_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn save_tensors(path: &Path, tensors: &HashMap<String, Tensor>) -> Result<()> {
    candle_core::safetensors::save(tensors, path).map_err(|e| checkpoint_err(path, e.to_string()))
}

fn load_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(checkpoint_err(path, "file is missing"));
    }
    candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| checkpoint_err(path, e.to_string()))
}

impl CheckpointBundle {
    pub fn best_epoch(&self) -> usize {
        self.snapshot.best_epoch
    }

    pub fn best_val_metric(&self) -> f64 {
        self.snapshot.best_val_metric
    }

    pub fn config(&self) -> &RunConfig {
        &self.snapshot.config
    }

    /// Writes the bundle directory, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensors(&dir.join(ADAPTERS_FILE), &self.adapters)?;
        save_tensors(&dir.join(HEAD_FILE), &self.head)?;
        if let Some(base) = &self.base {
            save_tensors(&dir.join(BASE_FILE), base)?;
        }
        let snap = dir.join(SNAPSHOT_FILE);
        std::fs::write(&snap, toml::to_string_pretty(&self.snapshot)?).map_err(|e| Error::io(&snap, e))?;
        write_history(&dir.join(HISTORY_FILE), &self.history)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let snap_path = dir.join(SNAPSHOT_FILE);
        let text = std::fs::read_to_string(&snap_path).map_err(|e| Error::io(&snap_path, e))?;
        let snapshot: Snapshot =
            toml::from_str(&text).map_err(|e| checkpoint_err(&snap_path, e.to_string()))?;
        let base = if snapshot.includes_base {
            Some(load_tensors(&dir.join(BASE_FILE))?)
        } else {
            None
        };
        Ok(Self {
            adapters: load_tensors(&dir.join(ADAPTERS_FILE))?,
            head: load_tensors(&dir.join(HEAD_FILE))?,
            base,
            history: read_history(&dir.join(HISTORY_FILE))?,
            snapshot,
        })
    }

    /// Rebuilds the encoder and head with the stored weights.
    pub fn build_model(&self) -> Result<TaskModel> {
        let cfg = &self.snapshot.config;
        let mut encoder = AdaptedEncoder::inject_lora(cfg.backbone, &cfg.weights, &cfg.lora, cfg.seed)?;
        encoder.set_freeze_policy(cfg.freeze_policy);
        encoder.load_adapter_tensors(&self.adapters)?;
        if let Some(base) = &self.base {
            encoder.load_base_tensors(base)?;
        }
        let head = TaskHead::new(self.snapshot.head, cfg.seed)?;
        head.load_tensors(&self.head)?;
        Ok(TaskModel {
            encoder,
            head,
            task: cfg.task.clone(),
        })
    }
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Directory of a bundle for repeat `repeat` under `root`.
pub fn split_dir(root: &Path, repeat: usize) -> PathBuf {
    root.join(format!("split_{repeat}"))
}
