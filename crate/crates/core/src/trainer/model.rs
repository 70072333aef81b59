use candle_core::Tensor;
use image::RgbImage;
use rayon::prelude::*;

use crate::backbone::{AdaptedEncoder, ForwardOptions};
use crate::data::{eval_rng, inference_image_views, Normalizer, Sample};
use crate::error::{Error, Result};
use crate::heads::TaskHead;
use crate::task::TaskSpec;

/// An adapted encoder with the head for one task.
#[derive(Debug)]
pub struct TaskModel {
    pub encoder: AdaptedEncoder,
    pub head: TaskHead,
    pub task: TaskSpec,
}

/// Averaged head output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Mean over views of the head output row.
    pub output: Vec<f64>,
    /// Head outputs of every view, in view order.
    pub per_view: Vec<Vec<f64>>,
}

impl Prediction {
    pub fn score(&self) -> f64 {
        self.output[0]
    }
}

/// Seed index for a sample's inference views: derived from the file name so
/// an image gets the same crops whichever manifest or split it appears in.
pub fn view_key(sample: &Sample) -> usize {
    let name = sample
        .image_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h as usize
}

impl TaskModel {
    pub fn normalizer(&self) -> Normalizer {
        Normalizer::for_family(self.encoder.id().family)
    }

    /// Head outputs `[n, out]` for prepared views.
    pub fn forward_views(&self, views: &[RgbImage], opts: &ForwardOptions) -> Result<Tensor> {
        let pixels = self.normalizer().batch(views)?;
        let pooled = self.encoder.forward(&pixels, opts)?.pooled;
        self.head.forward(&pooled)
    }

    pub fn outputs(&self, views: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        let out = self.forward_views(views, &ForwardOptions::inference())?;
        Ok(out
            .to_dtype(candle_core::DType::F64)?
            .to_vec2::<f64>()?)
    }

    /// Views used at evaluation time for `sample`.
    pub fn views(&self, sample: &Sample, seed: u64) -> Result<Vec<RgbImage>> {
        sample_views(&self.task, sample, seed)
    }

    /// Predictions for `samples`, forwarding about `batch_size` views at a
    /// time. Multi-view outputs are averaged per sample.
    pub fn predict(&self, samples: &[Sample], seed: u64, batch_size: usize) -> Result<Vec<Prediction>> {
        predict_with(&self.encoder, &self.head, &self.task, samples, seed, batch_size)
    }
}

fn sample_views(task: &TaskSpec, sample: &Sample, seed: u64) -> Result<Vec<RgbImage>> {
    let img = sample.load_image()?;
    Ok(inference_image_views(&img, task.kind, &mut eval_rng(seed, view_key(sample))))
}

/// Inference-protocol predictions of `head` on top of `encoder`.
pub(crate) fn predict_with(
    encoder: &AdaptedEncoder,
    head: &TaskHead,
    task: &TaskSpec,
    samples: &[Sample],
    seed: u64,
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let per_sample = match task.kind {
        crate::task::TaskKind::Iqa => crate::data::IQA_INFERENCE_CROPS,
        _ => 1,
    };
    let normalizer = Normalizer::for_family(encoder.id().family);
    let chunk = (batch_size / per_sample).max(1);
    let mut out = Vec::with_capacity(samples.len());
    for group in samples.chunks(chunk) {
        let views: Vec<Vec<RgbImage>> = group
            .par_iter()
            .map(|s| sample_views(task, s, seed))
            .collect::<Result<_>>()?;
        let flat: Vec<RgbImage> = views.iter().flatten().cloned().collect();
        let pooled = encoder.forward(&normalizer.batch(&flat)?, &ForwardOptions::inference())?.pooled;
        let rows = head
            .forward(&pooled)?
            .to_dtype(candle_core::DType::F64)?
            .to_vec2::<f64>()?;
        let mut at = 0;
        for v in &views {
            let per_view = rows[at..at + v.len()].to_vec();
            at += v.len();
            out.push(average(per_view));
        }
    }
    Ok(out)
}

fn average(per_view: Vec<Vec<f64>>) -> Prediction {
    let n = per_view.len() as f64;
    let width = per_view[0].len();
    let mut output = vec![0.0; width];
    for row in &per_view {
        for (o, v) in output.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut output {
        *o /= n;
    }
    Prediction { output, per_view }
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite {what}")));
    }
    Ok(())
}
