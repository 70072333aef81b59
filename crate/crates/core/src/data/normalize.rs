use candle_core::{Device, Tensor};
use image::RgbImage;

use crate::backbone::BackboneFamily;
use crate::error::{Error, Result};

/// Per-channel `(x − mean) / std` with a backbone's published constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalizer {
    pub fn for_family(family: BackboneFamily) -> Self {
        let (mean, std) = family.normalization();
        Self { mean, std }
    }

    fn channel_tensors(&self, device: &Device) -> Result<(Tensor, Tensor)> {
        let mean = Tensor::from_slice(&self.mean, (1, 3, 1, 1), device)?;
        let std = Tensor::from_slice(&self.std, (1, 3, 1, 1), device)?;
        Ok((mean, std))
    }

    fn check(batch: &Tensor) -> Result<()> {
        match batch.dims() {
            [_, 3, _, _] => Ok(()),
            [_, c, _, _] => Err(Error::Shape(format!("expected 3 channels, got {c}"))),
            other => Err(Error::Shape(format!("expected [batch, 3, h, w], got {other:?}"))),
        }
    }

    /// `batch`: `[n, 3, h, w]` with values in `[0, 1]`.
    pub fn normalize(&self, batch: &Tensor) -> Result<Tensor> {
        Self::check(batch)?;
        let (mean, std) = self.channel_tensors(batch.device())?;
        Ok(batch.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    pub fn denormalize(&self, batch: &Tensor) -> Result<Tensor> {
        Self::check(batch)?;
        let (mean, std) = self.channel_tensors(batch.device())?;
        Ok(batch.broadcast_mul(&std)?.broadcast_add(&mean)?)
    }

    /// Channel-major normalized pixels of one image.
    pub fn normalize_image(&self, img: &RgbImage) -> Vec<f32> {
        let (w, h) = img.dimensions();
        let plane = (w * h) as usize;
        let mut out = vec![0f32; 3 * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                out[c * plane + i] = (f32::from(px[c]) / 255.0 - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    /// Stacks equally sized images into a normalized `[n, 3, h, w]` tensor.
    pub fn batch(&self, images: &[RgbImage]) -> Result<Tensor> {
        let Some(first) = images.first() else {
            return Err(Error::Shape("empty image batch".into()));
        };
        let (w, h) = first.dimensions();
        if images.iter().any(|i| i.dimensions() != (w, h)) {
            return Err(Error::Shape("images in a batch must share dimensions".into()));
        }
        let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
        for img in images {
            data.extend(self.normalize_image(img));
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), &Device::Cpu)?)
    }
}

/// `[n, 3, h, w]` tensor with values in `[0, 1]`.
pub fn images_to_unit_tensor(images: &[RgbImage]) -> Result<Tensor> {
    let identity = Normalizer {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
    identity.batch(images)
}
