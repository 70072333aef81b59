use std::collections::BTreeMap;
use std::path::Path;

use super::checkpoint::CheckpointBundle;
use super::model::{check_finite, Prediction, TaskModel};
use crate::data::{Label, Sample};
use crate::error::{Error, Result};
use crate::metrics::{
    classification_report, corrected_plcc, plcc, srcc, EvalReport, SplitMetrics,
};
use crate::objectives::mse_loss;
use crate::task::{TaskKind, TaskSpec, ValidationMetric};

fn scores(samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            s.label.score().ok_or_else(|| {
                Error::TaskMismatch(format!("{}: expected a score label", s.image_path.display()))
            })
        })
        .collect()
}

fn classes(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.label.class().ok_or_else(|| {
                Error::TaskMismatch(format!("{}: expected a class label", s.image_path.display()))
            })
        })
        .collect()
}

/// Which metrics a report carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSet {
    /// SRCC, 4PL-corrected PLCC and raw PLCC.
    Iqa,
    /// SRCC, PLCC and MSE.
    Memorability,
    /// SRCC and PLCC only, for targets on a foreign scale.
    Correlation,
    /// Accuracy, mAP, macro-F1 and weighted-F1.
    Classification,
}

impl MetricSet {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Iqa => MetricSet::Iqa,
            TaskKind::Memorability => MetricSet::Memorability,
            TaskKind::Emotion => MetricSet::Classification,
        }
    }
}

/// Metrics of `predictions` against the labels of `samples`.
pub fn compute_metrics(
    set: MetricSet,
    predictions: &[Prediction],
    samples: &[Sample],
) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    if set == MetricSet::Classification {
        let logits: Vec<Vec<f64>> = predictions.iter().map(|p| p.output.clone()).collect();
        let r = classification_report(&logits, &classes(samples)?)?;
        m.insert("accuracy".into(), r.accuracy);
        m.insert("map".into(), r.map);
        m.insert("macro_f1".into(), r.macro_f1);
        m.insert("weighted_f1".into(), r.weighted_f1);
        return Ok(m);
    }
    let pred: Vec<f64> = predictions.iter().map(Prediction::score).collect();
    check_finite(&pred, "prediction")?;
    let target = scores(samples)?;
    m.insert("srcc".into(), srcc(&pred, &target)?);
    let raw = plcc(&pred, &target)?;
    match set {
        MetricSet::Iqa => {
            let corrected = match corrected_plcc(&pred, &target) {
                Ok(v) => v,
                Err(Error::Degenerate(msg)) => {
                    log::warn!("4PL correction skipped ({msg}); reporting raw PLCC");
                    raw
                }
                Err(e) => return Err(e),
            };
            m.insert("plcc".into(), corrected);
            m.insert("plcc_raw".into(), raw);
        }
        MetricSet::Memorability => {
            m.insert("plcc".into(), raw);
            m.insert("mse".into(), mse_loss(&pred, &target)?);
        }
        MetricSet::Correlation => {
            m.insert("plcc".into(), raw);
        }
        MetricSet::Classification => unreachable!(),
    }
    Ok(m)
}

/// Validation score driving early stopping and checkpoint selection.
///
/// A constant prediction vector has no rank correlation; it scores 0.
pub fn validation_score(task: &TaskSpec, predictions: &[Prediction], samples: &[Sample]) -> Result<f64> {
    match task.validation_metric() {
        ValidationMetric::Srcc => {
            let pred: Vec<f64> = predictions.iter().map(Prediction::score).collect();
            check_finite(&pred, "validation prediction")?;
            match srcc(&pred, &scores(samples)?) {
                Ok(v) => Ok(v),
                Err(Error::Degenerate(msg)) => {
                    log::warn!("validation SRCC undefined ({msg}); scoring 0");
                    Ok(0.0)
                }
                Err(e) => Err(e),
            }
        }
        ValidationMetric::Accuracy => {
            let labels = classes(samples)?;
            let correct = predictions
                .iter()
                .zip(&labels)
                .filter(|(p, l)| crate::metrics::argmax(&p.output) == **l)
                .count();
            Ok(correct as f64 / labels.len() as f64)
        }
    }
}

/// Predictions and metrics of one evaluated split.
#[derive(Debug, Clone)]
pub struct SplitEvaluation {
    pub metrics: SplitMetrics,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate_samples(
    model: &TaskModel,
    samples: &[Sample],
    set: MetricSet,
    split: &str,
    seed: u64,
    batch_size: usize,
) -> Result<SplitEvaluation> {
    if samples.is_empty() {
        return Err(Error::Data(format!("split `{split}` has no samples")));
    }
    let predictions = model.predict(samples, seed, batch_size)?;
    let metrics = compute_metrics(set, &predictions, samples)?;
    Ok(SplitEvaluation {
        metrics: SplitMetrics {
            split: split.to_owned(),
            samples: samples.len(),
            metrics,
        },
        predictions,
    })
}

/// Metrics of `bundle` on its own task's `test` samples.
pub fn evaluate(bundle: &CheckpointBundle, test: &[Sample], split: &str) -> Result<SplitEvaluation> {
    let model = bundle.build_model()?;
    check_labels(&model.task, test)?;
    let cfg = bundle.config();
    evaluate_samples(&model, test, MetricSet::for_task(model.task.kind), split, cfg.seed, cfg.batch_size)
}

/// Metrics of `bundle` on another dataset without retraining.
///
/// Regression models get SRCC and PLCC on any regression dataset, plus the
/// usual task metrics when the tasks coincide. Classification models need
/// the same label space.
pub fn cross_evaluate(
    bundle: &CheckpointBundle,
    foreign_task: &TaskSpec,
    samples: &[Sample],
    split: &str,
) -> Result<SplitEvaluation> {
    let model = bundle.build_model()?;
    model.task.compatible_with(foreign_task)?;
    check_labels(&model.task, samples)?;
    let set = if foreign_task.kind == model.task.kind {
        MetricSet::for_task(model.task.kind)
    } else {
        MetricSet::Correlation
    };
    let cfg = bundle.config();
    evaluate_samples(&model, samples, set, split, cfg.seed, cfg.batch_size)
}

fn check_labels(task: &TaskSpec, samples: &[Sample]) -> Result<()> {
    for s in samples {
        match (task.kind.is_classification(), s.label) {
            (true, Label::Class(c)) => {
                if let Some(n) = task.num_classes {
                    if c >= n {
                        return Err(Error::TaskMismatch(format!(
                            "{}: class {c} outside the model's {n} classes",
                            s.image_path.display()
                        )));
                    }
                }
            }
            (false, Label::Score(_)) => {}
            (true, Label::Score(_)) | (false, Label::Class(_)) => {
                return Err(Error::TaskMismatch(format!(
                    "{}: label type does not match a {} model",
                    s.image_path.display(),
                    task.kind
                )))
            }
        }
    }
    Ok(())
}

/// Builds a report from per-split evaluations.
pub fn report(
    dataset_id: &str,
    checkpoint_id: &str,
    kind: TaskKind,
    splits: &[SplitEvaluation],
) -> Result<EvalReport> {
    EvalReport::new(
        dataset_id,
        checkpoint_id,
        kind.aggregation(),
        splits.iter().map(|s| s.metrics.clone()).collect(),
    )
}

/// One row per sample: `image_id,path,label,prediction` for regression and
/// `image_id,path,label,predicted,logit_0..` for classification.
pub fn write_predictions(path: &Path, samples: &[Sample], predictions: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let width = predictions.first().map_or(1, |p| p.output.len());
    let classification = samples.first().is_some_and(|s| s.label.class().is_some());
    let mut header = vec!["image_id".to_owned(), "path".to_owned(), "label".to_owned()];
    if classification {
        header.push("predicted".into());
        header.extend((0..width).map(|k| format!("logit_{k}")));
    } else {
        header.push("prediction".into());
    }
    w.write_record(&header)?;
    for (s, p) in samples.iter().zip(predictions) {
        let mut rec = vec![s.image_id(), s.image_path.display().to_string(), s.label.to_string()];
        if classification {
            rec.push(crate::metrics::argmax(&p.output).to_string());
            rec.extend(p.output.iter().map(|v| format!("{v:.6}")));
        } else {
            rec.push(format!("{:.6}", p.score()));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
