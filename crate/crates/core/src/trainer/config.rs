use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneId, FreezePolicy, LoraConfig, WeightSource};
use crate::data::{make_splits, Dataset, Split, SplitPlan};
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::task::TaskSpec;

pub const DEFAULT_LEARNING_RATES: [f64; 4] = [5e-5, 1e-4, 5e-4, 1e-3];

fn default_backbone() -> BackboneId {
    BackboneId::CLIP_LARGE_14
}
fn default_learning_rates() -> Vec<f64> {
    DEFAULT_LEARNING_RATES.to_vec()
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_patience() -> usize {
    12
}
fn default_max_epochs() -> usize {
    40
}
fn default_batch_size() -> usize {
    32
}

/// One dataset taking part in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: String,
    pub manifest: PathBuf,
    pub task: TaskSpec,
    /// Falls back to the task's standard protocol when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitPlan>,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        Dataset::load(&self.manifest, self.id.clone(), self.task.clone())
    }

    /// The configured split plan, or the task's standard one seeded with
    /// `seed`.
    pub fn plan(&self, seed: u64) -> SplitPlan {
        self.split
            .clone()
            .unwrap_or_else(|| SplitPlan::for_task(self.task.kind, seed))
    }

    /// Split repeats of `dataset` restricted to `repeats` when given.
    pub fn splits(&self, dataset: &Dataset, seed: u64, repeats: Option<&[usize]>) -> Result<Vec<Split>> {
        let all = make_splits(&dataset.samples, &self.plan(seed))?;
        select_repeats(all, repeats)
    }
}

/// Keeps the listed repeats, in the listed order.
pub fn select_repeats(all: Vec<Split>, repeats: Option<&[usize]>) -> Result<Vec<Split>> {
    let Some(wanted) = repeats else {
        return Ok(all);
    };
    wanted
        .iter()
        .map(|&k| {
            all.iter().find(|s| s.repeat == k).cloned().ok_or_else(|| {
                Error::config("repeats", format!("repeat {k} does not exist; {} available", all.len()))
            })
        })
        .collect()
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_backbone")]
    pub backbone: BackboneId,
    #[serde(default)]
    pub weights: WeightSource,
    #[serde(default)]
    pub freeze_policy: FreezePolicy,
    #[serde(default = "default_learning_rates")]
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub task: TaskSpec,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub head: HeadConfig,
    /// Datasets for the `train` and `train-multi` commands.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub datasets: Vec<DatasetConfig>,
    /// Epoch budget of the head-only second stage of multi-dataset
    /// training; `max_epochs` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_max_epochs: Option<usize>,
    /// Split repeats to train; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn new(task: TaskSpec) -> Self {
        Self {
            seed: 0,
            backbone: default_backbone(),
            weights: WeightSource::default(),
            freeze_policy: FreezePolicy::default(),
            learning_rates: default_learning_rates(),
            weight_decay: default_weight_decay(),
            patience: default_patience(),
            max_epochs: default_max_epochs(),
            batch_size: default_batch_size(),
            task,
            lora: LoraConfig::default(),
            head: HeadConfig::default(),
            datasets: Vec::new(),
            stage2_max_epochs: None,
            repeats: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.lora.validate()?;
        if self.learning_rates.is_empty() {
            return Err(Error::config("learning_rates", "at least one learning rate is required"));
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::config("learning_rates", "learning rates must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::config("patience", "must lie in 1..=max_epochs"));
        }
        if self.stage2_max_epochs == Some(0) {
            return Err(Error::config("stage2_max_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for d in &self.datasets {
            d.task.validate()?;
            if let Some(s) = &d.split {
                s.validate()?;
            }
        }
        Ok(())
    }

    /// Extra checks for joint training over `datasets`: at least two of
    /// them, unique ids, and one task kind throughout.
    pub fn validate_multi(&self) -> Result<()> {
        self.validate()?;
        if self.datasets.len() < 2 {
            return Err(Error::config("datasets", "multi-dataset training needs at least two datasets"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::DuplicateDataset(d.id.clone()));
            }
            if d.task.kind != self.task.kind {
                return Err(Error::config(
                    format!("datasets.{}.task.kind", d.id),
                    format!("`{}` differs from the run's task kind `{}`", d.task.kind, self.task.kind),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_value(toml::from_str(text)?)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: RunConfig = value.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file and applies `key.path=value` overrides in order.
    /// Relative manifest paths resolve against the file's directory and are
    /// stored absolute, so a written-out config works from anywhere.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        let mut value: toml::Value = toml::from_str(&text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.datasets {
            if d.manifest.is_relative() {
                let joined = base.join(&d.manifest);
                d.manifest = std::path::absolute(&joined).unwrap_or(joined);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Applies `a.b.c=value` to a TOML document. The value is parsed as TOML
/// when possible and taken as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "malformed override key"));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));

    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
        node = table
            .entry((*part).to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::config(key, "parent is not a table"))?
        .insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;

    const MINIMAL: &str = "[task]\nkind = \"iqa\"\n";

    #[test]
    fn defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.learning_rates, vec![5e-5, 1e-4, 5e-4, 1e-3]);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!((cfg.patience, cfg.max_epochs, cfg.batch_size), (12, 40, 32));
        assert_eq!(cfg.backbone, BackboneId::CLIP_LARGE_14);
        assert_eq!(cfg.freeze_policy, FreezePolicy::LoraOnly);
        assert_eq!(cfg.lora.rank, 16);
        assert_eq!(cfg, RunConfig::new(TaskSpec::new(TaskKind::Iqa)));
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::new(TaskSpec::classification(8));
        cfg.weights = WeightSource::Random { seed: 4 };
        cfg.datasets.push(DatasetConfig {
            id: "emoset".into(),
            manifest: "m.csv".into(),
            task: TaskSpec::classification(8),
            split: Some(SplitPlan::emoset(1)),
        });
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides() {
        let mut doc: toml::Value = toml::from_str(MINIMAL).unwrap();
        apply_override(&mut doc, "lora.rank=4").unwrap();
        apply_override(&mut doc, "backbone=clip-vit-base-32").unwrap();
        apply_override(&mut doc, "learning_rates=[1e-3]").unwrap();
        apply_override(&mut doc, "weights.kind=zeros").unwrap();
        let cfg = RunConfig::from_value(doc).unwrap();
        assert_eq!(cfg.lora.rank, 4);
        assert_eq!(cfg.backbone, BackboneId::CLIP_BASE_32);
        assert_eq!(cfg.learning_rates, vec![1e-3]);
        assert_eq!(cfg.weights, WeightSource::Zeros);
        let mut doc: toml::Value = toml::from_str(MINIMAL).unwrap();
        assert!(apply_override(&mut doc, "no_equals").is_err());
        assert!(apply_override(&mut doc, "task.kind.x=1").is_err());
    }

    #[test]
    fn invalid_values() {
        let bad = [
            "learning_rates = []\n[task]\nkind = \"iqa\"\n",
            "patience = 50\n[task]\nkind = \"iqa\"\n",
            "batch_size = 0\n[task]\nkind = \"iqa\"\n",
            "unknown = 1\n[task]\nkind = \"iqa\"\n",
            "[task]\nkind = \"emotion\"\n",
        ];
        for text in bad {
            assert!(RunConfig::from_toml_str(text).is_err(), "{text}");
        }
    }
}
