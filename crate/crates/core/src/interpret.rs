//! Attention-head ablation and attention-difference maps.
//!
//! A head is ablated by overwriting its post-softmax CLS attention row with
//! the uniform distribution and running the rest of the network as usual.
//! Analyses use a single center view per image.

use std::path::{Path, PathBuf};

use candle_core::{DType, IndexOp, Tensor};
use image::{imageops, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::{AdaptedEncoder, ForwardOptions, HeadId, HeadMask, MaskScope, RecordAttention};
use crate::data::{resize_center_crop, CROP_SIZE};
use crate::error::{Error, Result};
use crate::metrics::{argmax, softmax};
use crate::trainer::TaskModel;

/// Images forwarded together during an analysis.
const CHUNK: usize = 16;

/// The single view an image is analysed at.
pub fn analysis_view(img: &RgbImage) -> RgbImage {
    resize_center_crop(img, CROP_SIZE)
}

/// How a prediction change is turned into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    /// Absolute change of the regression output.
    Score,
    /// Absolute change of the probability of the unmasked argmax class.
    ArgmaxProbability,
}

impl DeltaKind {
    pub fn for_model(model: &TaskModel) -> Self {
        if model.task.kind.is_classification() {
            DeltaKind::ArgmaxProbability
        } else {
            DeltaKind::Score
        }
    }
}

/// Options shared by all ablation calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationOptions {
    pub scope: MaskScope,
    /// Spread the uniform weight over patch tokens only.
    pub exclude_cls: bool,
}

impl AblationOptions {
    fn mask(&self, head: HeadId) -> HeadMask {
        HeadMask {
            head,
            scope: self.scope,
            exclude_cls: self.exclude_cls,
        }
    }
}

fn head_outputs(model: &TaskModel, views: &[RgbImage], mask: Option<HeadMask>) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(views.len());
    for chunk in views.chunks(CHUNK) {
        let opts = ForwardOptions {
            mask,
            ..ForwardOptions::inference()
        };
        let rows = model.forward_views(chunk, &opts)?;
        out.extend(rows.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(out)
}

/// Head output for each view with `head` ablated.
pub fn masked_predict(
    model: &TaskModel,
    views: &[RgbImage],
    head: HeadId,
    options: AblationOptions,
) -> Result<Vec<Vec<f64>>> {
    model.encoder.check_head(head)?;
    head_outputs(model, views, Some(options.mask(head)))
}

/// Unablated head outputs, the reference for every delta.
#[derive(Debug, Clone)]
pub struct Baseline {
    kind: DeltaKind,
    outputs: Vec<Vec<f64>>,
    classes: Vec<usize>,
}

impl Baseline {
    pub fn new(model: &TaskModel, views: &[RgbImage]) -> Result<Self> {
        let outputs = head_outputs(model, views, None)?;
        let classes = outputs.iter().map(|r| argmax(r)).collect();
        Ok(Self {
            kind: DeltaKind::for_model(model),
            outputs,
            classes,
        })
    }

    pub fn kind(&self) -> DeltaKind {
        self.kind
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    /// Per-image absolute prediction change under `masked` outputs.
    pub fn deltas(&self, masked: &[Vec<f64>]) -> Vec<f64> {
        self.outputs
            .iter()
            .zip(masked)
            .zip(&self.classes)
            .map(|((base, m), &c)| match self.kind {
                DeltaKind::Score => (base[0] - m[0]).abs(),
                DeltaKind::ArgmaxProbability => (softmax(base)[c] - softmax(m)[c]).abs(),
            })
            .collect()
    }
}

/// Per-image absolute prediction change from ablating `head`.
pub fn prediction_deltas(
    model: &TaskModel,
    views: &[RgbImage],
    head: HeadId,
    options: AblationOptions,
) -> Result<Vec<f64>> {
    let baseline = Baseline::new(model, views)?;
    Ok(baseline.deltas(&masked_predict(model, views, head, options)?))
}

/// Mean absolute prediction change from ablating `head` over `views`.
pub fn head_importance(
    model: &TaskModel,
    views: &[RgbImage],
    head: HeadId,
    options: AblationOptions,
) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::Data("head importance needs at least one image".into()));
    }
    let d = prediction_deltas(model, views, head, options)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadImportance {
    pub layer: usize,
    pub head: usize,
    pub importance: f64,
}

/// Importance of every head of the encoder over one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    /// Layer-major order.
    pub entries: Vec<HeadImportance>,
    pub n_images: usize,
    pub delta: DeltaKind,
    /// Per-head, per-image deltas in the order of `entries`.
    pub deltas: Vec<Vec<f64>>,
}

impl ImportanceTable {
    /// Heads sorted by decreasing importance, ties in layer-major order.
    pub fn ranked(&self) -> Vec<HeadImportance> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| b.importance.total_cmp(&a.importance));
        v
    }

    pub fn get(&self, head: HeadId) -> Option<&HeadImportance> {
        self.entries.iter().find(|e| e.layer == head.layer && e.head == head.head)
    }

    /// `layer,head,importance,n_images`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "head", "importance", "n_images"])?;
        for e in &self.entries {
            w.write_record([
                e.layer.to_string(),
                e.head.to_string(),
                format!("{:.9e}", e.importance),
                self.n_images.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Ablates each head in turn over `views`.
pub fn importance_table(model: &TaskModel, views: &[RgbImage], options: AblationOptions) -> Result<ImportanceTable> {
    if views.is_empty() {
        return Err(Error::Data("head importance needs at least one image".into()));
    }
    let arch = model.encoder.architecture();
    let baseline = Baseline::new(model, views)?;
    let mut entries = Vec::with_capacity(arch.num_layers * arch.num_heads);
    let mut deltas = Vec::with_capacity(entries.capacity());
    for layer in 0..arch.num_layers {
        for h in 0..arch.num_heads {
            let head = HeadId::new(layer, h);
            let d = baseline.deltas(&masked_predict(model, views, head, options)?);
            let importance = d.iter().sum::<f64>() / d.len() as f64;
            if !importance.is_finite() {
                return Err(Error::Numerical(format!("importance of head {layer}/{h} is {importance}")));
            }
            log::debug!("head {layer}/{h}: {importance:.6}");
            entries.push(HeadImportance {
                layer,
                head: h,
                importance,
            });
            deltas.push(d);
        }
    }
    Ok(ImportanceTable {
        entries,
        n_images: views.len(),
        delta: baseline.kind(),
        deltas,
    })
}

/// Indices of the `k` largest deltas, largest first; equal deltas keep
/// their corpus order.
pub fn top_effect_images(deltas: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > deltas.len() {
        return Err(Error::Data(format!("asked for {k} images from a corpus of {}", deltas.len())));
    }
    let mut idx: Vec<usize> = (0..deltas.len()).collect();
    idx.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]));
    idx.truncate(k);
    Ok(idx)
}

/// Fine-tuned minus base CLS attention of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDiff {
    pub head: HeadId,
    /// Patches per side.
    pub grid_size: usize,
    /// `grid_size²` values in row-major patch order.
    pub grid: Vec<f64>,
    /// Side of the upsampled map, equal to the input size.
    pub size: usize,
    /// `size²` bilinearly upsampled values.
    pub map: Vec<f64>,
}

impl AttentionDiff {
    pub fn max_abs(&self) -> f64 {
        self.map.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// CLS-query attention over the patch tokens of `head`, `[patches]`.
pub fn cls_patch_attention(encoder: &AdaptedEncoder, pixels: &Tensor, head: HeadId, opts: ForwardOptions) -> Result<Vec<f64>> {
    encoder.check_head(head)?;
    let out = encoder.forward(
        pixels,
        &ForwardOptions {
            record: RecordAttention::Layer(head.layer),
            ..opts
        },
    )?;
    let (_, probs) = out
        .attentions
        .into_iter()
        .next()
        .ok_or_else(|| Error::Shape("attention of the requested layer was not recorded".into()))?;
    let t = probs.dim(3)?;
    Ok(probs
        .i((0, head.head, 0))?
        .narrow(0, 1, t - 1)?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}

/// Attention difference between `finetuned` and `base` for one image,
/// given as a view at the encoder's input size.
pub fn attention_diff_map(
    finetuned: &AdaptedEncoder,
    base: &AdaptedEncoder,
    view: &RgbImage,
    head: HeadId,
) -> Result<AttentionDiff> {
    if finetuned.architecture() != base.architecture() {
        return Err(Error::Shape(format!(
            "cannot compare attention of {} with {}",
            finetuned.id(),
            base.id()
        )));
    }
    let arch = finetuned.architecture();
    let pixels = crate::data::Normalizer::for_family(finetuned.id().family).batch(std::slice::from_ref(view))?;
    let tuned = cls_patch_attention(finetuned, &pixels, head, ForwardOptions::inference())?;
    let reference = cls_patch_attention(base, &pixels, head, ForwardOptions::inference())?;
    let grid: Vec<f64> = tuned.iter().zip(&reference).map(|(a, b)| a - b).collect();
    let g = arch.grid_size();
    let size = arch.image_size;
    Ok(AttentionDiff {
        head,
        grid_size: g,
        map: upsample_bilinear(&grid, g, size),
        grid,
        size,
    })
}

/// Bilinear resize of a `g×g` grid to `size×size` with pixel-centre
/// alignment and edge clamping.
pub fn upsample_bilinear(grid: &[f64], g: usize, size: usize) -> Vec<f64> {
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(g as u32, g as u32, |x, y| Luma([grid[y as usize * g + x as usize] as f32]));
    let up = imageops::resize(&buf, size as u32, size as u32, imageops::FilterType::Triangle);
    up.pixels().map(|p| f64::from(p[0])).collect()
}

/// `{image_id}_{layer}_{head}.png`
pub fn overlay_file_name(image_id: &str, head: HeadId) -> String {
    format!("{image_id}_{}_{}.png", head.layer, head.head)
}

/// Blends a diverging red/blue rendering of `diff` over `view` and writes
/// it to `dir`, returning the file path. Red marks attention gained by
/// fine-tuning, blue attention lost; the scale is symmetric around zero.
pub fn render_overlay(view: &RgbImage, diff: &AttentionDiff, dir: &Path, image_id: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let view = if view.width() as usize == diff.size && view.height() as usize == diff.size {
        view.clone()
    } else {
        imageops::resize(view, diff.size as u32, diff.size as u32, imageops::FilterType::Triangle)
    };
    let scale = diff.max_abs();
    let out = RgbImage::from_fn(view.width(), view.height(), |x, y| {
        let v = diff.map[y as usize * diff.size + x as usize];
        let s = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
        let tint = diverging(s);
        let alpha = 0.6 * s.abs();
        let px = view.get_pixel(x, y);
        Rgb(std::array::from_fn(|c| {
            (f64::from(px[c]) * (1.0 - alpha) + tint[c] * alpha).round().clamp(0.0, 255.0) as u8
        }))
    });
    let path = dir.join(overlay_file_name(image_id, diff.head));
    out.save(&path).map_err(|e| Error::Image {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

fn diverging(s: f64) -> [f64; 3] {
    if s >= 0.0 {
        [255.0, 255.0 * (1.0 - s), 255.0 * (1.0 - s)]
    } else {
        [255.0 * (1.0 + s), 255.0 * (1.0 + s), 255.0]
    }
}
