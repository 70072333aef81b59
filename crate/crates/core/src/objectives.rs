//! Training losses.
//!
//! Each loss exists twice: a tensor form used for autograd during training
//! and a plain `f64` form used for reporting and for checking the tensor
//! form.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard added (squared) under the square root of the PLCC denominator.
pub const PLCC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Plcc,
    Mse,
    CrossEntropy,
}

impl LossKind {
    /// Correlation losses need at least two samples per batch.
    pub fn min_batch(self) -> usize {
        match self {
            LossKind::Plcc => 2,
            LossKind::Mse | LossKind::CrossEntropy => 1,
        }
    }
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

struct Centered {
    pred: Vec<f64>,
    target: Vec<f64>,
    cov: f64,
    sxx: f64,
    syy: f64,
}

fn center(pred: &[f64], target: &[f64]) -> Result<Centered> {
    check_pair(pred, target)?;
    if pred.len() < 2 {
        return Err(Error::Degenerate(format!(
            "PLCC loss needs at least 2 samples, got {}",
            pred.len()
        )));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let pred: Vec<f64> = pred.iter().map(|p| p - mp).collect();
    let target: Vec<f64> = target.iter().map(|t| t - mt).collect();
    let cov = pred.iter().zip(&target).map(|(a, b)| a * b).sum();
    let sxx = pred.iter().map(|a| a * a).sum();
    let syy = target.iter().map(|b| b * b).sum();
    if sxx == 0.0 || syy == 0.0 {
        log::warn!("PLCC loss on a constant batch; correlation is undefined and the loss is 0.5");
    }
    Ok(Centered {
        pred,
        target,
        cov,
        sxx,
        syy,
    })
}

/// `½ (1 − r)` with `r = cov / sqrt(Sxx·Syy + ε²)`.
pub fn plcc_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    let c = center(pred, target)?;
    let r = c.cov / (c.sxx * c.syy + PLCC_EPS * PLCC_EPS).sqrt();
    Ok(0.5 * (1.0 - r))
}

/// Closed-form gradient of [`plcc_loss`] with respect to the predictions.
pub fn plcc_loss_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    let c = center(pred, target)?;
    let denom = (c.sxx * c.syy + PLCC_EPS * PLCC_EPS).sqrt();
    let denom3 = denom * denom * denom;
    Ok(c.pred
        .iter()
        .zip(&c.target)
        .map(|(pm, tm)| -0.5 * (tm / denom - c.cov * c.syy * pm / denom3))
        .collect())
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.is_empty() {
        return Err(Error::Degenerate("MSE of an empty batch".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean negative log-softmax of the target class.
pub fn cross_entropy_loss(logits: &[Vec<f64>], classes: &[usize]) -> Result<f64> {
    if logits.len() != classes.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            logits.len(),
            classes.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Degenerate("cross-entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &c) in logits.iter().zip(classes) {
        if c >= row.len() {
            return Err(Error::Data(format!(
                "class index {c} out of range for {} classes",
                row.len()
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - row[c];
    }
    Ok(total / logits.len() as f64)
}

/// Differentiable PLCC loss over `[m]` predictions and targets.
pub fn plcc_loss_tensor(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let m = pred.elem_count();
    if m < 2 || m != target.elem_count() {
        return Err(Error::Shape(format!(
            "PLCC loss needs matching batches of at least 2, got {m} and {}",
            target.elem_count()
        )));
    }
    let pred = pred.flatten_all()?;
    let target = target.flatten_all()?.to_dtype(pred.dtype())?;
    let pm = pred.broadcast_sub(&pred.mean_all()?)?;
    let tm = target.broadcast_sub(&target.mean_all()?)?;
    let cov = (&pm * &tm)?.sum_all()?;
    let sxx = pm.sqr()?.sum_all()?;
    let syy = tm.sqr()?.sum_all()?;
    let denom = ((sxx * syy)? + PLCC_EPS * PLCC_EPS)?.sqrt()?;
    let r = (cov / denom)?;
    Ok(r.affine(-0.5, 0.5)?)
}

pub fn mse_loss_tensor(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let pred = pred.flatten_all()?;
    let target = target.flatten_all()?.to_dtype(pred.dtype())?;
    if pred.elem_count() != target.elem_count() || pred.elem_count() == 0 {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            pred.elem_count(),
            target.elem_count()
        )));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Mean cross-entropy of `[m, C]` logits against class indices.
pub fn cross_entropy_tensor(logits: &Tensor, classes: &[usize]) -> Result<Tensor> {
    let (m, c) = logits.dims2()?;
    if m != classes.len() {
        return Err(Error::Shape(format!("{m} logit rows vs {} labels", classes.len())));
    }
    let mut onehot = vec![0f32; m * c];
    for (i, &k) in classes.iter().enumerate() {
        if k >= c {
            return Err(Error::Data(format!("class index {k} out of range for {c} classes")));
        }
        onehot[i * c + k] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (m, c), logits.device())?.to_dtype(logits.dtype())?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok((logp * onehot)?.sum_all()?.affine(-1.0 / m as f64, 0.0)?)
}

/// Targets of a training batch.
#[derive(Debug, Clone)]
pub enum Targets {
    Scores(Vec<f32>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Scores(v) => v.len(),
            Targets::Classes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss of head outputs `[m, out]` under `kind`.
pub fn compute_loss(kind: LossKind, outputs: &Tensor, targets: &Targets) -> Result<Tensor> {
    match (kind, targets) {
        (LossKind::Plcc, Targets::Scores(t)) | (LossKind::Mse, Targets::Scores(t)) => {
            let target = Tensor::from_slice(t, t.len(), outputs.device())?;
            let pred = outputs.flatten_all()?;
            if kind == LossKind::Plcc {
                plcc_loss_tensor(&pred, &target)
            } else {
                mse_loss_tensor(&pred, &target)
            }
        }
        (LossKind::CrossEntropy, Targets::Classes(c)) => cross_entropy_tensor(outputs, c),
        (kind, _) => Err(Error::TaskMismatch(format!(
            "loss {kind:?} does not match the target type"
        ))),
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
