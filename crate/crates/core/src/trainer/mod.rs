//! Single-dataset training: AdamW over the trainable set, early stopping on
//! a validation metric, and a sweep over learning rates.

mod checkpoint;
mod config;
mod evaluate;
mod model;

use std::collections::HashMap;
use std::path::Path;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use checkpoint::{
    read_history, split_dir, write_history, CheckpointBundle, EpochRecord, Snapshot, ADAPTERS_FILE,
    BASE_FILE, HEAD_FILE, HISTORY_FILE, SNAPSHOT_FILE,
};
pub use config::{apply_override, select_repeats, DatasetConfig, RunConfig, DEFAULT_LEARNING_RATES};
pub use evaluate::{
    compute_metrics, cross_evaluate, evaluate, evaluate_samples, report, validation_score,
    write_predictions, MetricSet, SplitEvaluation,
};
pub use model::{view_key, Prediction, TaskModel};
pub(crate) use model::predict_with;

use crate::backbone::{AdaptedEncoder, ForwardOptions};
use crate::data::{
    augment_view, default_iqa_replicas, shuffle_rng, train_rng, AugmentationPolicy, Dataset, Label,
    Sample, Split,
};
use crate::error::{Error, Result};
use crate::heads::TaskHead;
use crate::metrics::EvalReport;
use crate::objectives::{compute_loss, scalar, Targets};
use crate::task::{TaskKind, TaskSpec};

/// Patience-based stopping on a metric where larger is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Starts from an existing best value attributed to epoch 0.
    pub fn with_baseline(patience: usize, baseline: f64) -> Self {
        Self {
            best: Some(baseline),
            ..Self::new(patience)
        }
    }

    /// Only a strictly larger value counts as an improvement.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Train, validation and test samples of one split repeat.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub dataset_id: String,
    pub name: String,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitData {
    pub fn new(dataset: &Dataset, split: &Split) -> Self {
        Self {
            dataset_id: dataset.id.clone(),
            name: split.name(),
            train: dataset.subset(&split.train),
            val: dataset.subset(&split.val),
            test: dataset.subset(&split.test),
        }
    }
}

/// Copies of every weight that training can change.
#[derive(Debug, Clone)]
pub(crate) struct WeightSnapshot {
    pub adapters: HashMap<String, Tensor>,
    pub heads: Vec<HashMap<String, Tensor>>,
    pub base: Option<HashMap<String, Tensor>>,
}

impl WeightSnapshot {
    pub(crate) fn take(encoder: &AdaptedEncoder, heads: &[&TaskHead]) -> Result<Self> {
        Ok(Self {
            adapters: encoder.adapter_tensors()?,
            heads: heads.iter().map(|h| h.tensors()).collect::<Result<_>>()?,
            base: if encoder.base_trainable() {
                Some(encoder.base_tensors()?)
            } else {
                None
            },
        })
    }
}

pub(crate) fn build_encoder(config: &RunConfig) -> Result<AdaptedEncoder> {
    let mut encoder =
        AdaptedEncoder::inject_lora(config.backbone, &config.weights, &config.lora, config.seed)?;
    encoder.set_freeze_policy(config.freeze_policy);
    Ok(encoder)
}

pub(crate) fn build_head(config: &RunConfig, task: &TaskSpec, embed_dim: usize, salt: u64) -> Result<TaskHead> {
    let shape = config.head.resolve(embed_dim, task.output_dim()?)?;
    TaskHead::new(shape, config.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub(crate) fn policy_for(task: &TaskSpec, n_train: usize) -> Result<AugmentationPolicy> {
    let replicas = match task.kind {
        TaskKind::Iqa => task.iqa_replicas.unwrap_or_else(|| default_iqa_replicas(n_train)),
        _ => 3,
    };
    AugmentationPolicy::new(task.kind, replicas)
}

pub(crate) fn optimizer(vars: Vec<candle_core::Var>, lr: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay,
            ..ParamsAdamW::default()
        },
    )?)
}

/// One training view to be produced: a sample and its replica index.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Unit {
    pub sample: usize,
    pub replica: usize,
}

/// Every replica of every sample, shuffled for `epoch`.
pub(crate) fn epoch_units(n: usize, policy: &AugmentationPolicy, seed: u64, epoch: usize) -> Vec<Unit> {
    let r = policy.views_per_sample();
    let mut units: Vec<Unit> = (0..n)
        .flat_map(|sample| (0..r).map(move |replica| Unit { sample, replica }))
        .collect();
    units.shuffle(&mut shuffle_rng(seed, epoch));
    units
}

/// Cuts `units` into batches of `batch_size`; a trailing batch smaller than
/// `min_batch` is folded into the one before it.
pub(crate) fn batches(units: &[Unit], batch_size: usize, min_batch: usize) -> Result<Vec<&[Unit]>> {
    let mut out: Vec<&[Unit]> = Vec::new();
    let mut start = 0;
    while start < units.len() {
        let end = (start + batch_size).min(units.len());
        if end - start < min_batch {
            match out.pop() {
                Some(prev) => out.push(&units[start - prev.len()..end]),
                None => {
                    return Err(Error::Data(format!(
                        "{} training views cannot fill a batch of at least {min_batch}",
                        units.len()
                    )))
                }
            }
        } else {
            out.push(&units[start..end]);
        }
        start = end;
    }
    Ok(out)
}

/// Decodes and augments the views of one batch.
pub(crate) fn load_batch(
    samples: &[Sample],
    units: &[Unit],
    policy: &AugmentationPolicy,
    seed: u64,
    epoch: usize,
) -> Result<(Vec<image::RgbImage>, Targets)> {
    let r = policy.views_per_sample();
    let views = units
        .par_iter()
        .map(|u| {
            let img = samples[u.sample].load_image()?;
            let mut rng = train_rng(seed, epoch, u.sample * r + u.replica);
            Ok(augment_view(&img, policy, &mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = match samples[units[0].sample].label {
        Label::Score(_) => Targets::Scores(
            units
                .iter()
                .map(|u| samples[u.sample].label.score().map(|v| v as f32))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Data("mixed label types in one dataset".into()))?,
        ),
        Label::Class(_) => Targets::Classes(
            units
                .iter()
                .map(|u| samples[u.sample].label.class())
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Data("mixed label types in one dataset".into()))?,
        ),
    };
    Ok((views, targets))
}

/// Loss of one batch, erroring on a non-finite value.
pub(crate) fn batch_loss(
    model_encoder: &AdaptedEncoder,
    head: &TaskHead,
    task: &TaskSpec,
    views: &[image::RgbImage],
    targets: &Targets,
    context: impl FnOnce() -> String,
) -> Result<(Tensor, f64)> {
    let pixels = crate::data::Normalizer::for_family(model_encoder.id().family).batch(views)?;
    let pooled = model_encoder.forward(&pixels, &ForwardOptions::training())?.pooled;
    let outputs = head.forward(&pooled)?;
    let loss = compute_loss(task.loss(), &outputs, targets)?;
    let value = scalar(&loss)?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value} at {}", context())));
    }
    Ok((loss, value))
}

/// Trains adapters and head at learning rate `lr` and returns the weights of
/// the best validation epoch.
pub fn train_one(config: &RunConfig, lr: f64, data: &SplitData) -> Result<CheckpointBundle> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data(format!("{}: empty training split", data.name)));
    }
    if data.val.is_empty() {
        return Err(Error::Data(format!("{}: empty validation split", data.name)));
    }
    let task = &config.task;
    let encoder = build_encoder(config)?;
    let head = build_head(config, task, encoder.embed_dim(), 0)?;
    let model = TaskModel {
        encoder,
        head,
        task: task.clone(),
    };
    let policy = policy_for(task, data.train.len())?;
    let mut vars = model.encoder.trainable_vars();
    vars.extend(model.head.vars());
    let mut opt = optimizer(vars, lr, config.weight_decay)?;

    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = WeightSnapshot::take(&model.encoder, &[&model.head])?;
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let units = epoch_units(data.train.len(), &policy, config.seed, epoch);
        let mut total = 0.0;
        for (b, batch) in batches(&units, config.batch_size, task.loss().min_batch())?
            .into_iter()
            .enumerate()
        {
            let (views, targets) = load_batch(&data.train, batch, &policy, config.seed, epoch)?;
            let (loss, value) = batch_loss(&model.encoder, &model.head, task, &views, &targets, || {
                format!(
                    "{} epoch {epoch} batch {b} (first image {})",
                    data.name,
                    data.train[batch[0].sample].image_path.display()
                )
            })?;
            opt.backward_step(&loss)?;
            total += value * batch.len() as f64;
        }
        let train_loss = total / units.len() as f64;
        let predictions = model.predict(&data.val, config.seed, config.batch_size)?;
        let val_metric = validation_score(task, &predictions, &data.val)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        let step = stopper.observe(epoch, val_metric);
        log::info!(
            "{} lr={lr:e} epoch {epoch}: train_loss={train_loss:.5} val={val_metric:.4}{}",
            data.name,
            if step.improved { " *" } else { "" }
        );
        if step.improved {
            best = WeightSnapshot::take(&model.encoder, &[&model.head])?;
        }
        if step.stop {
            log::info!("{}: no improvement for {} epochs; stopping", data.name, config.patience);
            break;
        }
    }

    Ok(CheckpointBundle {
        snapshot: Snapshot {
            dataset_id: data.dataset_id.clone(),
            learning_rate: lr,
            best_epoch: stopper.best_epoch(),
            best_val_metric: stopper.best().unwrap_or(f64::NEG_INFINITY),
            includes_base: best.base.is_some(),
            head: *model.head.shape(),
            config: config.clone(),
        },
        adapters: best.adapters,
        head: best.heads.into_iter().next().unwrap_or_default(),
        base: best.base,
        history,
    })
}

/// Outcome of one learning rate in a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LrRun {
    pub learning_rate: f64,
    /// `None` when the run diverged.
    pub best_val_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub best: CheckpointBundle,
    pub runs: Vec<LrRun>,
}

/// Picks the best validation metric among `candidates`, preferring the
/// smaller learning rate on ties. Entries are `(lr, metric)`.
pub fn select_learning_rate(candidates: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(lr, metric)) in candidates.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(j) => {
                let (blr, bm) = candidates[j];
                if metric > bm || (metric == bm && lr < blr) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    best
}

/// Runs [`train_one`] for every configured learning rate and keeps the best.
/// Diverging runs are logged and left out.
pub fn lr_sweep(config: &RunConfig, data: &SplitData) -> Result<SweepOutcome> {
    config.validate()?;
    let mut lrs = config.learning_rates.clone();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    let mut runs = Vec::new();
    let mut bundles = Vec::new();
    for &lr in &lrs {
        match train_one(config, lr, data) {
            Ok(bundle) => {
                runs.push(LrRun {
                    learning_rate: lr,
                    best_val_metric: Some(bundle.best_val_metric()),
                });
                bundles.push(bundle);
            }
            Err(Error::Numerical(msg)) => {
                log::warn!("lr={lr:e} diverged and is excluded: {msg}");
                runs.push(LrRun {
                    learning_rate: lr,
                    best_val_metric: None,
                });
            }
            Err(e) => return Err(e),
        }
    }
    let scored: Vec<(f64, f64)> = bundles
        .iter()
        .map(|b| (b.snapshot.learning_rate, b.best_val_metric()))
        .collect();
    let Some(i) = select_learning_rate(&scored) else {
        return Err(Error::Numerical(format!(
            "{}: every learning rate diverged",
            data.name
        )));
    };
    Ok(SweepOutcome {
        best: bundles.swap_remove(i),
        runs,
    })
}

/// Sweeps, saves and tests each split repeat of one dataset.
///
/// Bundles go to `out/split_<k>/` along with test predictions; the returned
/// report aggregates the test metrics over repeats.
pub fn run_protocol(
    config: &RunConfig,
    dataset: &Dataset,
    splits: &[Split],
    out: &Path,
) -> Result<EvalReport> {
    let mut evaluations = Vec::new();
    for split in splits {
        let data = SplitData::new(dataset, split);
        let outcome = lr_sweep(config, &data)?;
        let dir = split_dir(out, split.repeat);
        outcome.best.save(&dir)?;
        let eval = evaluate(&outcome.best, &data.test, &data.name)?;
        write_predictions(&dir.join("predictions.csv"), &data.test, &eval.predictions)?;
        log::info!(
            "{}: lr={:e} best_epoch={} test={:?}",
            data.name,
            outcome.best.snapshot.learning_rate,
            outcome.best.best_epoch(),
            eval.metrics.metrics
        );
        evaluations.push(eval);
    }
    let r = report(&dataset.id, &out.display().to_string(), config.task.kind, &evaluations)?;
    r.write(out, "report")?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_arithmetic() {
        let mut s = EarlyStopping::new(12);
        let mut seq = vec![0.5, 0.6];
        seq.extend(std::iter::repeat_n(0.6, 20));
        let mut stopped = None;
        for (i, v) in seq.iter().enumerate() {
            if s.observe(i + 1, *v).stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(14));
        assert_eq!(s.best_epoch(), 2);
        assert_eq!(s.best(), Some(0.6));
    }

    #[test]
    fn baseline_must_be_beaten() {
        let mut s = EarlyStopping::with_baseline(2, 0.7);
        assert!(!s.observe(1, 0.7).improved);
        assert!(s.observe(2, 0.65).stop);
        assert_eq!(s.best_epoch(), 0);
    }

    #[test]
    fn ties_go_to_smaller_lr() {
        assert_eq!(select_learning_rate(&[(1e-3, 0.8), (1e-4, 0.8)]), Some(1));
        assert_eq!(select_learning_rate(&[(1e-4, 0.8), (1e-3, 0.9)]), Some(1));
        assert_eq!(select_learning_rate(&[]), None);
    }

    #[test]
    fn trailing_batch_is_folded() {
        let units: Vec<Unit> = (0..65).map(|i| Unit { sample: i, replica: 0 }).collect();
        let b = batches(&units, 32, 2).unwrap();
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![32, 33]);
        let b = batches(&units, 32, 1).unwrap();
        assert_eq!(b.len(), 3);
        assert!(batches(&units[..1], 32, 2).is_err());
        let covered: usize = batches(&units, 10, 2).unwrap().iter().map(|x| x.len()).sum();
        assert_eq!(covered, 65);
    }

    #[test]
    fn epoch_units_cover_every_replica() {
        let policy = AugmentationPolicy::new(TaskKind::Iqa, 4).unwrap();
        let units = epoch_units(5, &policy, 0, 1);
        assert_eq!(units.len(), 20);
        let mut seen: Vec<(usize, usize)> = units.iter().map(|u| (u.sample, u.replica)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 20);
    }
}
