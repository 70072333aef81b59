//! Joint training over several datasets of one task kind.
//!
//! Stage 1 trains the shared adapters together with one head per dataset.
//! Every step draws its slots across datasets in proportion to their sizes
//! and averages the per-dataset losses. Stage 2 freezes the encoder and
//! refits a single head on its own dataset.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use candle_nn::Optimizer;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdaptedEncoder, ForwardOptions, FreezePolicy};
use crate::data::{shuffle_rng, AugmentationPolicy, Normalizer};
use crate::error::{Error, Result};
use crate::heads::{HeadRegistry, TaskHead};
use crate::objectives::{compute_loss, scalar, Targets};
use crate::task::TaskSpec;
use crate::metrics::EvalReport;
use crate::trainer::{
    evaluate, report, split_dir, write_predictions, SplitEvaluation,
    batch_loss, batches, build_encoder, build_head, epoch_units, load_batch, optimizer, policy_for,
    predict_with, select_learning_rate, validation_score, write_history, CheckpointBundle,
    EarlyStopping, EpochRecord, LrRun, RunConfig, Snapshot, SplitData, Unit, WeightSnapshot,
    ADAPTERS_FILE, HISTORY_FILE,
};

/// Shuffle-stream salt separating slot assignment from per-dataset shuffles.
const SAMPLER_SALT: u64 = 0x5A3C_0FF1_CE00_0001;

/// File at the root of a stage-1 directory listing its datasets.
pub const SHARED_SNAPSHOT_FILE: &str = "shared.snapshot";
/// Sub-directory holding one complete bundle per dataset.
pub const HEADS_DIR: &str = "heads";

/// Draws `batch_size` dataset indices, each independently with probability
/// proportional to `sizes`.
pub fn proportional_sampler(sizes: &[usize], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Data(format!("sampler needs positive dataset sizes, got {sizes:?}")));
    }
    let dist = WeightedIndex::new(sizes).map_err(|e| Error::Data(e.to_string()))?;
    Ok((0..batch_size).map(|_| dist.sample(rng)).collect())
}

/// One dataset of a joint run: its task and its current split.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub task: TaskSpec,
    pub data: SplitData,
}

impl DatasetSplit {
    fn id(&self) -> &str {
        &self.data.dataset_id
    }
}

/// Metadata of a stage-1 run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedSnapshot {
    pub learning_rate: f64,
    pub best_epoch: usize,
    /// Mean over datasets of the validation metric at `best_epoch`.
    pub best_val_metric: f64,
    pub datasets: Vec<String>,
}

/// Stage-1 result: shared adapters and a complete bundle for every dataset.
///
/// Every per-dataset bundle carries the same adapter weights, so each can be
/// evaluated or fine-tuned on its own.
#[derive(Debug, Clone)]
pub struct SharedBundle {
    pub snapshot: SharedSnapshot,
    /// Mean validation metric per epoch; `train_loss` is the mean step loss.
    pub history: Vec<EpochRecord>,
    pub per_dataset: BTreeMap<String, CheckpointBundle>,
}

impl SharedBundle {
    pub fn get(&self, dataset_id: &str) -> Result<&CheckpointBundle> {
        self.per_dataset
            .get(dataset_id)
            .ok_or_else(|| Error::UnknownDataset(dataset_id.to_owned()))
    }

    /// Writes `adapters.bin`, `history.csv`, `shared.snapshot` and
    /// `heads/<dataset_id>/` for every dataset.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let first = self
            .per_dataset
            .values()
            .next()
            .ok_or_else(|| Error::Data("shared bundle has no datasets".into()))?;
        let adapters = dir.join(ADAPTERS_FILE);
        candle_core::safetensors::save(&first.adapters, &adapters).map_err(|e| Error::Checkpoint {
            path: adapters.clone(),
            message: e.to_string(),
        })?;
        write_history(&dir.join(HISTORY_FILE), &self.history)?;
        let snap = dir.join(SHARED_SNAPSHOT_FILE);
        std::fs::write(&snap, toml::to_string_pretty(&self.snapshot)?).map_err(|e| Error::io(&snap, e))?;
        for (id, bundle) in &self.per_dataset {
            bundle.save(&dir.join(HEADS_DIR).join(id))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let snap_path = dir.join(SHARED_SNAPSHOT_FILE);
        let text = std::fs::read_to_string(&snap_path).map_err(|e| Error::io(&snap_path, e))?;
        let snapshot: SharedSnapshot = toml::from_str(&text).map_err(|e| Error::Checkpoint {
            path: snap_path.clone(),
            message: e.to_string(),
        })?;
        let per_dataset = snapshot
            .datasets
            .iter()
            .map(|id| Ok((id.clone(), CheckpointBundle::load(&dir.join(HEADS_DIR).join(id))?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            history: crate::trainer::read_history(&dir.join(HISTORY_FILE))?,
            snapshot,
            per_dataset,
        })
    }
}

/// Outcome of a stage-1 sweep over the configured learning rates.
#[derive(Debug, Clone)]
pub struct SharedSweep {
    pub best: SharedBundle,
    pub runs: Vec<LrRun>,
}

fn check_inputs(config: &RunConfig, datasets: &[DatasetSplit]) -> Result<()> {
    config.validate()?;
    if datasets.len() < 2 {
        return Err(Error::config("datasets", "multi-dataset training needs at least two datasets"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in datasets {
        d.task.validate()?;
        if d.task.kind != config.task.kind {
            return Err(Error::TaskMismatch(format!(
                "dataset `{}` is {} but the run is {}",
                d.id(),
                d.task.kind,
                config.task.kind
            )));
        }
        if !seen.insert(d.id()) {
            return Err(Error::DuplicateDataset(d.id().to_owned()));
        }
        if d.data.train.is_empty() || d.data.val.is_empty() {
            return Err(Error::Data(format!(
                "dataset `{}` needs non-empty train and validation splits",
                d.id()
            )));
        }
    }
    Ok(())
}

/// Per-dataset seed so that equal sample indices in different datasets get
/// different augmentations.
fn dataset_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93)
}

/// Endless shuffled stream of one dataset's training units.
struct UnitQueue {
    units: Vec<Unit>,
    cursor: usize,
    pass: usize,
    n: usize,
    policy: AugmentationPolicy,
    seed: u64,
    epoch: usize,
}

impl UnitQueue {
    fn new(n: usize, policy: AugmentationPolicy, seed: u64, epoch: usize) -> Self {
        Self {
            units: epoch_units(n, &policy, seed, epoch),
            cursor: 0,
            pass: 0,
            n,
            policy,
            seed,
            epoch,
        }
    }

    fn take(&mut self, count: usize) -> Vec<Unit> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor == self.units.len() {
                self.pass += 1;
                // Later passes within one epoch reshuffle with a distinct key.
                let key = self.epoch + self.pass * 1_000_003;
                self.units = epoch_units(self.n, &self.policy, self.seed, key);
                self.cursor = 0;
            }
            out.push(self.units[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Views of one joint step: `groups` holds `(dataset, first view, count,
/// targets)` over the concatenated `views`.
struct JointBatch {
    views: Vec<image::RgbImage>,
    groups: Vec<(usize, usize, usize, Targets)>,
}

/// Mean of the per-dataset losses of one step, plus each dataset's value.
///
/// The encoder runs once over all views; each dataset's rows go to its own
/// head only.
fn joint_loss(
    encoder: &AdaptedEncoder,
    heads: &[&TaskHead],
    datasets: &[DatasetSplit],
    batch: &JointBatch,
    context: impl Fn() -> String,
) -> Result<(Tensor, Vec<f64>)> {
    let pixels = Normalizer::for_family(encoder.id().family).batch(&batch.views)?;
    let pooled = encoder.forward(&pixels, &ForwardOptions::training())?.pooled;
    let mut losses = Vec::with_capacity(batch.groups.len());
    let mut values = Vec::with_capacity(batch.groups.len());
    for (i, start, len, targets) in &batch.groups {
        let out = heads[*i].forward(&pooled.narrow(0, *start, *len)?)?;
        let loss = compute_loss(datasets[*i].task.loss(), &out, targets)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss is {value} at {} (dataset `{}`)",
                context(),
                datasets[*i].id()
            )));
        }
        losses.push(loss);
        values.push(value);
    }
    let mean = (Tensor::stack(&losses, 0)?.sum_all()? / losses.len() as f64)?;
    Ok((mean, values))
}

/// Stage 1 at one learning rate.
pub fn stage1_train(config: &RunConfig, lr: f64, datasets: &[DatasetSplit]) -> Result<SharedBundle> {
    check_inputs(config, datasets)?;
    let encoder = build_encoder(config)?;
    let mut registry = HeadRegistry::new();
    for (i, d) in datasets.iter().enumerate() {
        registry.register(d.id(), build_head(config, &d.task, encoder.embed_dim(), i as u64 + 1)?)?;
    }
    let heads: Vec<&TaskHead> = datasets.iter().map(|d| registry.get(d.id())).collect::<Result<_>>()?;
    let policies: Vec<AugmentationPolicy> = datasets
        .iter()
        .map(|d| policy_for(&d.task, d.data.train.len()))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = (0..datasets.len()).map(|i| dataset_seed(config.seed, i)).collect();
    let sizes: Vec<usize> = datasets.iter().map(|d| d.data.train.len()).collect();
    let total_units: usize = datasets
        .iter()
        .zip(&policies)
        .map(|(d, p)| d.data.train.len() * p.views_per_sample())
        .sum();
    let steps = total_units.div_ceil(config.batch_size);

    let mut vars = encoder.trainable_vars();
    vars.extend(registry.vars());
    let mut opt = optimizer(vars, lr, config.weight_decay)?;

    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = WeightSnapshot::take(&encoder, &heads)?;
    let mut best_per_dataset = vec![f64::NEG_INFINITY; datasets.len()];
    let mut history = Vec::new();
    let mut dataset_history: Vec<Vec<EpochRecord>> = vec![Vec::new(); datasets.len()];

    for epoch in 1..=config.max_epochs {
        let mut queues: Vec<UnitQueue> = datasets
            .iter()
            .zip(&policies)
            .zip(&seeds)
            .map(|((d, p), s)| UnitQueue::new(d.data.train.len(), *p, *s, epoch))
            .collect();
        let mut slot_rng = shuffle_rng(config.seed ^ SAMPLER_SALT, epoch);
        let mut loss_sum = vec![0.0; datasets.len()];
        let mut loss_n = vec![0usize; datasets.len()];
        let mut step_sum = 0.0;
        let mut step_n = 0usize;
        for step in 0..steps {
            let slots = proportional_sampler(&sizes, config.batch_size, &mut slot_rng)?;
            let mut counts = vec![0usize; datasets.len()];
            for &s in &slots {
                counts[s] += 1;
            }
            let mut views = Vec::new();
            let mut groups = Vec::new();
            for (i, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let units = queues[i].take(c);
                let min = datasets[i].task.loss().min_batch();
                if c < min {
                    log::warn!(
                        "epoch {epoch} step {step}: {c} view(s) of `{}` below the loss minimum {min}; skipped",
                        datasets[i].id()
                    );
                    continue;
                }
                let (v, targets) = load_batch(&datasets[i].data.train, &units, &policies[i], seeds[i], epoch)?;
                groups.push((i, views.len(), c, targets));
                views.extend(v);
            }
            if groups.is_empty() {
                continue;
            }
            let batch = JointBatch { views, groups };
            let (mean, values) = joint_loss(&encoder, &heads, datasets, &batch, || format!("epoch {epoch} step {step}"))?;
            for ((i, _, len, _), value) in batch.groups.iter().zip(values) {
                loss_sum[*i] += value * *len as f64;
                loss_n[*i] += len;
            }
            step_sum += scalar(&mean)?;
            step_n += 1;
            opt.backward_step(&mean)?;
        }

        let mut metrics = Vec::with_capacity(datasets.len());
        for (i, d) in datasets.iter().enumerate() {
            let preds = predict_with(&encoder, heads[i], &d.task, &d.data.val, config.seed, config.batch_size)?;
            let m = validation_score(&d.task, &preds, &d.data.val)?;
            metrics.push(m);
            dataset_history[i].push(EpochRecord {
                epoch,
                train_loss: if loss_n[i] > 0 { loss_sum[i] / loss_n[i] as f64 } else { f64::NAN },
                val_metric: m,
            });
        }
        let val_metric = metrics.iter().sum::<f64>() / metrics.len() as f64;
        let train_loss = if step_n > 0 { step_sum / step_n as f64 } else { f64::NAN };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        let decision = stopper.observe(epoch, val_metric);
        log::info!(
            "joint lr={lr:e} epoch {epoch}: loss={train_loss:.5} mean_val={val_metric:.4} {metrics:?}{}",
            if decision.improved { " *" } else { "" }
        );
        if decision.improved {
            best = WeightSnapshot::take(&encoder, &heads)?;
            best_per_dataset = metrics;
        }
        if decision.stop {
            break;
        }
    }

    let includes_base = best.base.is_some();
    let mut per_dataset = BTreeMap::new();
    for (i, (d, head_weights)) in datasets.iter().zip(best.heads).enumerate() {
        let mut cfg = config.clone();
        cfg.task = d.task.clone();
        cfg.datasets.clear();
        per_dataset.insert(
            d.id().to_owned(),
            CheckpointBundle {
                snapshot: Snapshot {
                    dataset_id: d.id().to_owned(),
                    learning_rate: lr,
                    best_epoch: stopper.best_epoch(),
                    best_val_metric: best_per_dataset[i],
                    includes_base,
                    head: *heads[i].shape(),
                    config: cfg,
                },
                adapters: best.adapters.clone(),
                head: head_weights,
                base: best.base.clone(),
                history: std::mem::take(&mut dataset_history[i]),
            },
        );
    }
    Ok(SharedBundle {
        snapshot: SharedSnapshot {
            learning_rate: lr,
            best_epoch: stopper.best_epoch(),
            best_val_metric: stopper.best().unwrap_or(f64::NEG_INFINITY),
            datasets: datasets.iter().map(|d| d.id().to_owned()).collect(),
        },
        history,
        per_dataset,
    })
}

/// Stage 1 at every configured learning rate; the best mean validation
/// metric wins and diverging rates are dropped.
pub fn stage1_sweep(config: &RunConfig, datasets: &[DatasetSplit]) -> Result<SharedSweep> {
    check_inputs(config, datasets)?;
    let mut lrs = config.learning_rates.clone();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    let mut runs = Vec::new();
    let mut done = Vec::new();
    for lr in lrs {
        match stage1_train(config, lr, datasets) {
            Ok(bundle) => {
                runs.push(LrRun {
                    learning_rate: lr,
                    best_val_metric: Some(bundle.snapshot.best_val_metric),
                });
                done.push(bundle);
            }
            Err(Error::Numerical(msg)) => {
                log::warn!("joint lr={lr:e} diverged: {msg}");
                runs.push(LrRun {
                    learning_rate: lr,
                    best_val_metric: None,
                });
            }
            Err(e) => return Err(e),
        }
    }
    let candidates: Vec<(f64, f64)> = done
        .iter()
        .map(|b| (b.snapshot.learning_rate, b.snapshot.best_val_metric))
        .collect();
    let pick = select_learning_rate(&candidates)
        .ok_or_else(|| Error::Numerical("every learning rate diverged in joint training".into()))?;
    Ok(SharedSweep {
        best: done.swap_remove(pick),
        runs,
    })
}

/// Stage 2: refits the head of `data.dataset_id` on top of the frozen
/// stage-1 encoder, starting from and never falling below the stage-1 head.
pub fn stage2_finetune(shared: &SharedBundle, data: &SplitData) -> Result<CheckpointBundle> {
    let start = shared.get(&data.dataset_id)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data(format!(
            "dataset `{}` needs non-empty train and validation splits",
            data.dataset_id
        )));
    }
    let mut model = start.build_model()?;
    model.encoder.set_freeze_policy(FreezePolicy::FrozenBackbone);
    let cfg = start.config();
    let task = &model.task;
    let max_epochs = cfg.stage2_max_epochs.unwrap_or(cfg.max_epochs);
    let lr = start.snapshot.learning_rate;
    let policy = policy_for(task, data.train.len())?;
    let mut opt = optimizer(model.head.vars(), lr, cfg.weight_decay)?;
    let encoder_before = encoder_checksum(&model.encoder)?;

    let mut stopper = EarlyStopping::with_baseline(cfg.patience.min(max_epochs), start.best_val_metric());
    let mut best_head = start.head.clone();
    let mut history = Vec::new();
    for epoch in 1..=max_epochs {
        let units = epoch_units(data.train.len(), &policy, cfg.seed, epoch);
        let mut total = 0.0;
        for (b, batch) in batches(&units, cfg.batch_size, task.loss().min_batch())?
            .into_iter()
            .enumerate()
        {
            let (views, targets) = load_batch(&data.train, batch, &policy, cfg.seed, epoch)?;
            let (loss, value) = batch_loss(&model.encoder, &model.head, task, &views, &targets, || {
                format!("{} stage 2 epoch {epoch} batch {b}", data.name)
            })?;
            opt.backward_step(&loss)?;
            total += value * batch.len() as f64;
        }
        let train_loss = total / units.len() as f64;
        let preds = model.predict(&data.val, cfg.seed, cfg.batch_size)?;
        let val_metric = validation_score(task, &preds, &data.val)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        let decision = stopper.observe(epoch, val_metric);
        log::info!(
            "{} stage 2 epoch {epoch}: train_loss={train_loss:.5} val={val_metric:.4}{}",
            data.dataset_id,
            if decision.improved { " *" } else { "" }
        );
        if decision.improved {
            best_head = model.head.tensors()?;
        }
        if decision.stop {
            break;
        }
    }
    if encoder_checksum(&model.encoder)? != encoder_before {
        return Err(Error::Numerical("encoder weights changed during head-only fine-tuning".into()));
    }

    let mut snapshot = start.snapshot.clone();
    // Epoch 0 stands for the unchanged stage-1 head.
    snapshot.best_epoch = stopper.best_epoch();
    snapshot.best_val_metric = stopper.best().unwrap_or(start.best_val_metric());
    Ok(CheckpointBundle {
        snapshot,
        adapters: start.adapters.clone(),
        head: best_head,
        base: start.base.clone(),
        history,
    })
}

fn encoder_checksum(encoder: &AdaptedEncoder) -> Result<String> {
    Ok(format!("{}{}", encoder.base_checksum()?, encoder.adapter_checksum()?))
}

/// Stage 2 for every dataset of `shared`, in dataset order.
pub fn stage2_all(shared: &SharedBundle, datasets: &[DatasetSplit]) -> Result<BTreeMap<String, CheckpointBundle>> {
    datasets
        .iter()
        .map(|d| Ok((d.id().to_owned(), stage2_finetune(shared, &d.data)?)))
        .collect()
}

/// Joint training over every dataset of `config` for each split repeat.
///
/// Repeat `k` writes the stage-1 result to `out/split_k/joint/` and each
/// dataset's stage-2 bundle plus test predictions to `out/split_k/<id>/`.
/// Returns one test report per dataset, also written as `out/<id>_report.*`.
pub fn run_multi_protocol(config: &RunConfig, out: &Path) -> Result<BTreeMap<String, EvalReport>> {
    config.validate_multi()?;
    let mut loaded = Vec::with_capacity(config.datasets.len());
    for d in &config.datasets {
        let ds = d.load()?;
        let splits = d.splits(&ds, config.seed, None)?;
        loaded.push((d, ds, splits));
    }
    let available = loaded.iter().map(|(_, _, s)| s.len()).min().unwrap_or(0);
    let repeats: Vec<usize> = match &config.repeats {
        Some(r) => r.clone(),
        None => (0..available).collect(),
    };
    let mut evaluations: BTreeMap<String, Vec<SplitEvaluation>> = BTreeMap::new();
    for &k in &repeats {
        if k >= available {
            return Err(Error::config(
                "repeats",
                format!("repeat {k} does not exist for every dataset; {available} available"),
            ));
        }
        let parts: Vec<DatasetSplit> = loaded
            .iter()
            .map(|(d, ds, splits)| DatasetSplit {
                task: d.task.clone(),
                data: SplitData::new(ds, &splits[k]),
            })
            .collect();
        let dir = split_dir(out, k);
        let sweep = stage1_sweep(config, &parts)?;
        sweep.best.save(&dir.join("joint"))?;
        for part in &parts {
            let bundle = stage2_finetune(&sweep.best, &part.data)?;
            let sub = dir.join(part.id());
            bundle.save(&sub)?;
            let eval = evaluate(&bundle, &part.data.test, &part.data.name)?;
            write_predictions(&sub.join("predictions.csv"), &part.data.test, &eval.predictions)?;
            log::info!("{} {}: test={:?}", part.id(), part.data.name, eval.metrics.metrics);
            evaluations.entry(part.id().to_owned()).or_default().push(eval);
        }
    }
    let mut reports = BTreeMap::new();
    for (d, _, _) in &loaded {
        let evals = evaluations.remove(&d.id).unwrap_or_default();
        let r = report(&d.id, &out.display().to_string(), d.task.kind, &evals)?;
        r.write(out, &format!("{}_report", d.id))?;
        reports.insert(d.id.clone(), r);
    }
    Ok(reports)
}
