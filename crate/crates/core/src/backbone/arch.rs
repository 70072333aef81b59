//! Backbone identifiers and vision-transformer dimensions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Pretraining family of the image encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneFamily {
    Clip,
    Dinov2,
    Mae,
}

impl BackboneFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneFamily::Clip => "clip",
            BackboneFamily::Dinov2 => "dinov2",
            BackboneFamily::Mae => "mae",
        }
    }

    /// Per-channel `(mean, std)` published with the pretrained weights.
    pub fn normalization(self) -> ([f32; 3], [f32; 3]) {
        match self {
            BackboneFamily::Clip => (
                [0.481_454_66, 0.457_827_5, 0.408_210_73],
                [0.268_629_54, 0.261_302_58, 0.275_777_11],
            ),
            BackboneFamily::Dinov2 | BackboneFamily::Mae => {
                ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225])
            }
        }
    }

    pub fn activation(self) -> Activation {
        match self {
            BackboneFamily::Clip => Activation::QuickGelu,
            BackboneFamily::Dinov2 | BackboneFamily::Mae => Activation::Gelu,
        }
    }

    /// CLIP applies a layer norm to the token sequence before the first block.
    pub fn has_pre_norm(self) -> bool {
        matches!(self, BackboneFamily::Clip)
    }

    pub fn layer_norm_eps(self) -> f64 {
        match self {
            BackboneFamily::Clip => 1e-5,
            BackboneFamily::Dinov2 | BackboneFamily::Mae => 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    QuickGelu,
    Gelu,
}

/// Width/depth preset of a vision transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// Single layer, single head, width 8; for hand-checked forward passes.
    Toy,
    /// Two-layer toy width for smoke tests; no pretrained weights exist.
    Micro,
    Tiny,
    Small,
    Base,
    Large,
    Huge,
}

impl ModelSize {
    fn as_str(self) -> &'static str {
        match self {
            ModelSize::Toy => "toy",
            ModelSize::Micro => "micro",
            ModelSize::Tiny => "tiny",
            ModelSize::Small => "small",
            ModelSize::Base => "base",
            ModelSize::Large => "large",
            ModelSize::Huge => "huge",
        }
    }

    /// `(embed_dim, num_layers, num_heads, mlp_dim)`
    fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            ModelSize::Toy => (8, 1, 1, 16),
            ModelSize::Micro => (64, 2, 4, 256),
            ModelSize::Tiny => (192, 12, 3, 768),
            ModelSize::Small => (384, 12, 6, 1536),
            ModelSize::Base => (768, 12, 12, 3072),
            ModelSize::Large => (1024, 24, 16, 4096),
            ModelSize::Huge => (1280, 32, 16, 5120),
        }
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "toy" => ModelSize::Toy,
            "micro" => ModelSize::Micro,
            "tiny" => ModelSize::Tiny,
            "small" => ModelSize::Small,
            "base" => ModelSize::Base,
            "large" => ModelSize::Large,
            "huge" => ModelSize::Huge,
            _ => return Err(Error::UnknownBackbone(s.to_string())),
        })
    }
}

/// Identifier of a pretrained encoder variant, written `clip-vit-large-14`.
///
/// The short form `large/14` is accepted and means the CLIP family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BackboneId {
    pub family: BackboneFamily,
    pub size: ModelSize,
    pub patch_size: usize,
}

impl BackboneId {
    pub const CLIP_LARGE_14: BackboneId = BackboneId {
        family: BackboneFamily::Clip,
        size: ModelSize::Large,
        patch_size: 14,
    };
    pub const CLIP_BASE_16: BackboneId = BackboneId {
        family: BackboneFamily::Clip,
        size: ModelSize::Base,
        patch_size: 16,
    };
    pub const CLIP_BASE_32: BackboneId = BackboneId {
        family: BackboneFamily::Clip,
        size: ModelSize::Base,
        patch_size: 32,
    };
    pub const CLIP_MICRO_32: BackboneId = BackboneId {
        family: BackboneFamily::Clip,
        size: ModelSize::Micro,
        patch_size: 32,
    };

    pub fn architecture(&self) -> VitArchitecture {
        let (embed_dim, num_layers, num_heads, mlp_dim) = self.size.dims();
        VitArchitecture {
            family: self.family,
            embed_dim,
            num_layers,
            num_heads,
            mlp_dim,
            patch_size: self.patch_size,
            image_size: IMAGE_SIZE,
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-vit-{}-{}",
            self.family.as_str(),
            self.size.as_str(),
            self.patch_size
        )
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let unknown = || Error::UnknownBackbone(s.to_string());
        let (family, size, patch) = if let Some((size, patch)) = s.split_once('/') {
            (BackboneFamily::Clip, size, patch)
        } else {
            let parts: Vec<&str> = s.split('-').collect();
            let [family, "vit", size, patch] = parts.as_slice() else {
                return Err(unknown());
            };
            let family = match *family {
                "clip" => BackboneFamily::Clip,
                "dinov2" => BackboneFamily::Dinov2,
                "mae" => BackboneFamily::Mae,
                _ => return Err(unknown()),
            };
            (family, *size, *patch)
        };
        let size: ModelSize = size.parse().map_err(|_| unknown())?;
        let patch_size: usize = patch.parse().map_err(|_| unknown())?;
        if patch_size == 0 || !IMAGE_SIZE.is_multiple_of(patch_size) {
            return Err(unknown());
        }
        Ok(BackboneId {
            family,
            size,
            patch_size,
        })
    }
}

impl Serialize for BackboneId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackboneId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Input resolution shared by every supported backbone.
pub const IMAGE_SIZE: usize = 224;

/// Tensor dimensions of a pre-norm vision transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitArchitecture {
    pub family: BackboneFamily,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
}

impl VitArchitecture {
    /// Patches per side.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length including the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.grid_size() * self.grid_size() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Name and shape of every base weight, in a stable order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let p = self.patch_size;
        let mut shapes = vec![
            ("embeddings.patch_embedding.weight".to_string(), vec![d, 3, p, p]),
            ("embeddings.class_embedding".to_string(), vec![d]),
            (
                "embeddings.position_embedding".to_string(),
                vec![self.num_tokens(), d],
            ),
        ];
        if self.family.has_pre_norm() {
            shapes.push(("pre_layernorm.weight".to_string(), vec![d]));
            shapes.push(("pre_layernorm.bias".to_string(), vec![d]));
        }
        for i in 0..self.num_layers {
            let l = format!("layers.{i}");
            shapes.extend([
                (format!("{l}.layer_norm1.weight"), vec![d]),
                (format!("{l}.layer_norm1.bias"), vec![d]),
                (format!("{l}.self_attn.qkv.weight"), vec![3 * d, d]),
                (format!("{l}.self_attn.qkv.bias"), vec![3 * d]),
                (format!("{l}.self_attn.out_proj.weight"), vec![d, d]),
                (format!("{l}.self_attn.out_proj.bias"), vec![d]),
                (format!("{l}.layer_norm2.weight"), vec![d]),
                (format!("{l}.layer_norm2.bias"), vec![d]),
                (format!("{l}.mlp.fc1.weight"), vec![self.mlp_dim, d]),
                (format!("{l}.mlp.fc1.bias"), vec![self.mlp_dim]),
                (format!("{l}.mlp.fc2.weight"), vec![d, self.mlp_dim]),
                (format!("{l}.mlp.fc2.bias"), vec![d]),
            ]);
        }
        shapes.push(("post_layernorm.weight".to_string(), vec![d]));
        shapes.push(("post_layernorm.bias".to_string(), vec![d]));
        shapes
    }

    pub fn base_param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_long_and_short_ids() {
        let a: BackboneId = "clip-vit-large-14".parse().unwrap();
        let b: BackboneId = "large/14".parse().unwrap();
        assert_eq!(a, b);
        assert_eq!(a, BackboneId::CLIP_LARGE_14);
        assert_eq!(a.to_string(), "clip-vit-large-14");
        let d: BackboneId = "dinov2-vit-large-14".parse().unwrap();
        assert_eq!(d.family, BackboneFamily::Dinov2);
    }

    #[test]
    fn rejects_unknown_ids() {
        for bad in ["clip-vit-giant-14", "resnet50", "large/15", "clip-vit-base-0"] {
            assert!(matches!(
                bad.parse::<BackboneId>(),
                Err(Error::UnknownBackbone(_))
            ));
        }
    }

    #[test]
    fn large_14_grid_and_count() {
        let arch = BackboneId::CLIP_LARGE_14.architecture();
        assert_eq!(arch.grid_size(), 16);
        assert_eq!(arch.num_tokens(), 257);
        // 602_112 patch + 1_024 cls + 263_168 pos + 2_048 pre-norm
        // + 24 * 12_596_224 blocks + 2_048 post-norm
        assert_eq!(arch.base_param_count(), 303_179_776);
    }
}
