//! Base weight sources: seeded random init, zeros, or pretrained safetensors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::{BackboneId, VitArchitecture};
use crate::error::{Error, Result};

/// Environment variable naming the directory that caches pretrained weights.
///
/// Weights for `clip-vit-large-14` are looked up at
/// `$PERCEPTLAB_WEIGHTS_DIR/clip-vit-large-14/model.safetensors`.
pub const WEIGHTS_DIR_ENV: &str = "PERCEPTLAB_WEIGHTS_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WeightSource {
    /// Truncation-free Gaussian init (std 0.02), seeded.
    Random { seed: u64 },
    /// All-zero matrices; useful only for shape and parameter accounting.
    Zeros,
    /// A safetensors file in either the Hugging Face `CLIPVisionModel`
    /// layout or this crate's own layout. Without a path the weights cache
    /// directory is searched.
    Pretrained {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
}

impl Default for WeightSource {
    fn default() -> Self {
        WeightSource::Pretrained { path: None }
    }
}

pub(crate) fn resolve_pretrained_path(id: &BackboneId, path: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = path {
        return Ok(p.to_path_buf());
    }
    let dir = std::env::var_os(WEIGHTS_DIR_ENV).ok_or_else(|| {
        Error::UnknownBackbone(format!(
            "{id}: no pretrained weights path given and {WEIGHTS_DIR_ENV} is unset"
        ))
    })?;
    let p = PathBuf::from(dir).join(id.to_string()).join("model.safetensors");
    if !p.exists() {
        return Err(Error::UnknownBackbone(format!(
            "{id}: weights not found at {}",
            p.display()
        )));
    }
    Ok(p)
}

pub(crate) fn materialize(
    id: &BackboneId,
    arch: &VitArchitecture,
    source: &WeightSource,
) -> Result<HashMap<String, Tensor>> {
    let dev = Device::Cpu;
    match source {
        WeightSource::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let normal = Normal::new(0.0f32, 0.02).expect("valid std");
            arch.param_shapes()
                .into_iter()
                .map(|(name, shape)| {
                    let n: usize = shape.iter().product();
                    let t = if is_norm_weight(&name) {
                        Tensor::ones(shape, DType::F32, &dev)?
                    } else if is_bias(&name) {
                        Tensor::zeros(shape, DType::F32, &dev)?
                    } else {
                        let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                        Tensor::from_vec(data, shape, &dev)?
                    };
                    Ok((name, t))
                })
                .collect()
        }
        WeightSource::Zeros => arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| Ok((name, Tensor::zeros(shape, DType::F32, &dev)?)))
            .collect(),
        WeightSource::Pretrained { path } => {
            let path = resolve_pretrained_path(id, path.as_deref())?;
            let raw = candle_core::safetensors::load(&path, &dev)?;
            let canonical = canonicalize(raw, arch, &path)?;
            check_shapes(&canonical, arch, &path)?;
            Ok(canonical)
        }
    }
}

fn is_norm_weight(name: &str) -> bool {
    name.ends_with("layernorm.weight")
        || name.ends_with("layer_norm1.weight")
        || name.ends_with("layer_norm2.weight")
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

const HF_PREFIX: &str = "vision_model.";

/// Maps a checkpoint's tensor names onto the internal layout, fusing the
/// separate q/k/v projections of the Hugging Face layout.
fn canonicalize(
    raw: HashMap<String, Tensor>,
    arch: &VitArchitecture,
    path: &Path,
) -> Result<HashMap<String, Tensor>> {
    if !raw.keys().any(|k| k.starts_with(HF_PREFIX)) {
        return raw
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?)))
            .collect();
    }
    let take = |name: &str| -> Result<Tensor> {
        raw.get(name)
            .ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("missing tensor `{name}`"),
            })?
            .to_dtype(DType::F32)
            .map_err(Error::from)
    };
    let mut out = HashMap::new();
    out.insert(
        "embeddings.patch_embedding.weight".into(),
        take("vision_model.embeddings.patch_embedding.weight")?,
    );
    out.insert(
        "embeddings.class_embedding".into(),
        take("vision_model.embeddings.class_embedding")?,
    );
    out.insert(
        "embeddings.position_embedding".into(),
        take("vision_model.embeddings.position_embedding.weight")?,
    );
    if arch.family.has_pre_norm() {
        // Upstream spells it `pre_layrnorm`.
        for p in ["weight", "bias"] {
            out.insert(
                format!("pre_layernorm.{p}"),
                take(&format!("vision_model.pre_layrnorm.{p}"))?,
            );
        }
    }
    for i in 0..arch.num_layers {
        let src = format!("vision_model.encoder.layers.{i}");
        let dst = format!("layers.{i}");
        for p in ["weight", "bias"] {
            let q = take(&format!("{src}.self_attn.q_proj.{p}"))?;
            let k = take(&format!("{src}.self_attn.k_proj.{p}"))?;
            let v = take(&format!("{src}.self_attn.v_proj.{p}"))?;
            out.insert(format!("{dst}.self_attn.qkv.{p}"), Tensor::cat(&[q, k, v], 0)?);
            for module in [
                "self_attn.out_proj",
                "layer_norm1",
                "layer_norm2",
                "mlp.fc1",
                "mlp.fc2",
            ] {
                out.insert(
                    format!("{dst}.{module}.{p}"),
                    take(&format!("{src}.{module}.{p}"))?,
                );
            }
        }
    }
    for p in ["weight", "bias"] {
        out.insert(
            format!("post_layernorm.{p}"),
            take(&format!("vision_model.post_layernorm.{p}"))?,
        );
    }
    Ok(out)
}

fn check_shapes(
    weights: &HashMap<String, Tensor>,
    arch: &VitArchitecture,
    path: &Path,
) -> Result<()> {
    for (name, shape) in arch.param_shapes() {
        let t = weights.get(&name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("missing tensor `{name}`"),
        })?;
        if t.dims() != shape.as_slice() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("`{name}` has shape {:?}, expected {shape:?}", t.dims()),
            });
        }
    }
    Ok(())
}
