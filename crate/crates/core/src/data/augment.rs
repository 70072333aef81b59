use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Label, Sample};
use crate::error::{Error, Result};
use crate::task::TaskKind;

pub const CROP_SIZE: u32 = 224;
/// Number of random crops averaged at IQA inference.
pub const IQA_INFERENCE_CROPS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub task: TaskKind,
    /// Replicas produced per IQA training image; ignored for other tasks.
    pub iqa_replicas: usize,
    pub flip_prob: f64,
    pub crop_size: u32,
}

impl AugmentationPolicy {
    pub fn new(task: TaskKind, iqa_replicas: usize) -> Result<Self> {
        let policy = Self {
            task,
            iqa_replicas,
            flip_prob: 0.5,
            crop_size: CROP_SIZE,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task == TaskKind::Iqa && !(3..=10).contains(&self.iqa_replicas) {
            return Err(Error::config(
                "task.iqa_replicas",
                format!("{} is outside 3..=10", self.iqa_replicas),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("augment.flip_prob", "must lie in [0, 1]"));
        }
        if self.crop_size == 0 {
            return Err(Error::config("augment.crop_size", "must be positive"));
        }
        Ok(())
    }

    /// Training views produced per sample in one epoch.
    pub fn views_per_sample(&self) -> usize {
        if self.task == TaskKind::Iqa {
            self.iqa_replicas
        } else {
            1
        }
    }
}

/// Replica count for an IQA dataset of `n` images: 10 up to a thousand
/// images, 3 from ten thousand on, log-linear in between.
pub fn default_iqa_replicas(n: usize) -> usize {
    const SMALL: f64 = 1_000.0;
    const LARGE: f64 = 10_000.0;
    let n = n.max(1) as f64;
    if n <= SMALL {
        return 10;
    }
    if n >= LARGE {
        return 3;
    }
    let t = (n.ln() - SMALL.ln()) / (LARGE.ln() - SMALL.ln());
    (10.0 - 7.0 * t).round() as usize
}

/// Resizes so the shorter side equals `target`, keeping the aspect ratio.
pub fn resize_shortest_side(img: &RgbImage, target: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w.min(h) == target {
        return img.clone();
    }
    let (nw, nh) = if w <= h {
        (target, ((h as f64) * target as f64 / w as f64).round().max(target as f64) as u32)
    } else {
        (((w as f64) * target as f64 / h as f64).round().max(target as f64) as u32, target)
    };
    imageops::resize(img, nw, nh, FilterType::CatmullRom)
}

pub fn center_crop(img: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let x = (w - size) / 2;
    let y = (h - size) / 2;
    imageops::crop_imm(img, x, y, size, size).to_image()
}

fn ensure_min_side(img: &RgbImage, size: u32) -> std::borrow::Cow<'_, RgbImage> {
    let (w, h) = img.dimensions();
    if w.min(h) < size {
        static FIRST: std::sync::Once = std::sync::Once::new();
        let mut warned = false;
        FIRST.call_once(|| {
            log::warn!("{w}x{h} image is smaller than the {size}px crop; upscaling its shorter side (reported once)");
            warned = true;
        });
        if !warned {
            log::debug!("upscaling {w}x{h} image to a {size}px shorter side");
        }
        std::borrow::Cow::Owned(resize_shortest_side(img, size))
    } else {
        std::borrow::Cow::Borrowed(img)
    }
}

fn random_crop(img: &RgbImage, size: u32, rng: &mut impl Rng) -> RgbImage {
    let (w, h) = img.dimensions();
    let x = rng.random_range(0..=w - size);
    let y = rng.random_range(0..=h - size);
    imageops::crop_imm(img, x, y, size, size).to_image()
}

/// Crop with random area in [8%, 100%] and aspect ratio in [3/4, 4/3],
/// resized to `size`×`size`.
pub fn random_resized_crop(img: &RgbImage, size: u32, rng: &mut impl Rng) -> RgbImage {
    let (w, h) = img.dimensions();
    let area = (w * h) as f64;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(0.08..=1.0);
        let ratio = rng.random_range(lo..=hi).exp();
        let cw = (target * ratio).sqrt().round() as u32;
        let ch = (target / ratio).sqrt().round() as u32;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            let crop = imageops::crop_imm(img, x, y, cw, ch).to_image();
            return imageops::resize(&crop, size, size, FilterType::Triangle);
        }
    }
    let ratio = w as f64 / h as f64;
    let (cw, ch) = if ratio < 3.0 / 4.0 {
        (w, ((w as f64) * 4.0 / 3.0).round() as u32)
    } else if ratio > 4.0 / 3.0 {
        (((h as f64) * 4.0 / 3.0).round() as u32, h)
    } else {
        (w, h)
    };
    let crop = imageops::crop_imm(img, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image();
    imageops::resize(&crop, size, size, FilterType::Triangle)
}

/// Shorter side to `size`, then the central square.
pub fn resize_center_crop(img: &RgbImage, size: u32) -> RgbImage {
    center_crop(&resize_shortest_side(img, size), size)
}

/// One training view: a single IQA replica, or the emotion/memorability view.
pub fn augment_view(img: &RgbImage, policy: &AugmentationPolicy, rng: &mut impl Rng) -> RgbImage {
    let size = policy.crop_size;
    match policy.task {
        TaskKind::Iqa => {
            let img = ensure_min_side(img, size);
            let mut v = random_crop(&img, size, rng);
            if rng.random_bool(policy.flip_prob) {
                imageops::flip_horizontal_in_place(&mut v);
            }
            if rng.random_bool(policy.flip_prob) {
                imageops::flip_vertical_in_place(&mut v);
            }
            v
        }
        TaskKind::Emotion => {
            let mut v = random_resized_crop(img, size, rng);
            if rng.random_bool(policy.flip_prob) {
                imageops::flip_horizontal_in_place(&mut v);
            }
            v
        }
        TaskKind::Memorability => resize_center_crop(img, size),
    }
}

/// Training views of one decoded image under `policy`.
pub fn augment_image(img: &RgbImage, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Vec<RgbImage> {
    if policy.task == TaskKind::Iqa && img.width().min(img.height()) < policy.crop_size {
        let img = ensure_min_side(img, policy.crop_size).into_owned();
        return (0..policy.iqa_replicas).map(|_| augment_view(&img, policy, rng)).collect();
    }
    (0..policy.views_per_sample())
        .map(|_| augment_view(img, policy, rng))
        .collect()
}

/// Loads `sample` and returns its training views, each paired with the
/// sample's label.
pub fn augment_train(
    sample: &Sample,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<(RgbImage, Label)>> {
    let img = sample.load_image()?;
    Ok(augment_image(&img, policy, rng)
        .into_iter()
        .map(|v| (v, sample.label))
        .collect())
}

/// Evaluation views: fifteen random crops for IQA, one centred view
/// otherwise.
pub fn inference_image_views(img: &RgbImage, task: TaskKind, rng: &mut impl Rng) -> Vec<RgbImage> {
    match task {
        TaskKind::Iqa => {
            let img = ensure_min_side(img, CROP_SIZE);
            (0..IQA_INFERENCE_CROPS)
                .map(|_| random_crop(&img, CROP_SIZE, rng))
                .collect()
        }
        TaskKind::Memorability | TaskKind::Emotion => vec![resize_center_crop(img, CROP_SIZE)],
    }
}

pub fn inference_views(sample: &Sample, task: TaskKind, rng: &mut impl Rng) -> Result<Vec<RgbImage>> {
    Ok(inference_image_views(&sample.load_image()?, task, rng))
}
