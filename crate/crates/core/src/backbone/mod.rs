//! Vision-transformer image encoder with low-rank adapters on the attention
//! query/key/value projections.

mod arch;
mod lora;
pub(crate) mod ops;
mod weights;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use arch::{Activation, BackboneFamily, BackboneId, ModelSize, VitArchitecture, IMAGE_SIZE};
pub use lora::{LoraConfig, Projection};
pub use weights::{WeightSource, WEIGHTS_DIR_ENV};

use crate::error::{Error, Result};

/// Which parameter groups receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Base weights frozen, adapters trained.
    #[default]
    LoraOnly,
    /// Every encoder parameter trained, adapters included.
    FullFinetune,
    /// Nothing in the encoder is trained; pure feature extraction.
    FrozenBackbone,
}

/// One attention head, addressed by layer and head index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

/// Which attention rows of a head get replaced by the uniform distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    /// Only the CLS query row.
    #[default]
    ClsRow,
    /// Every query row of the head.
    FullMatrix,
}

/// Post-softmax replacement of one head's attention with a uniform map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadMask {
    pub head: HeadId,
    pub scope: MaskScope,
    /// When false the uniform weight `1/N` covers all `N` tokens, the CLS
    /// token included; when true it covers only the patch tokens.
    pub exclude_cls: bool,
}

impl HeadMask {
    pub fn cls_row(head: HeadId) -> Self {
        Self {
            head,
            scope: MaskScope::ClsRow,
            exclude_cls: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordAttention {
    #[default]
    None,
    All,
    Layer(usize),
}

/// Per-call switches for [`AdaptedEncoder::forward`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Skip the adapter branch entirely, giving the base encoder.
    pub bypass_adapters: bool,
    pub mask: Option<HeadMask>,
    pub record: RecordAttention,
    /// Enables adapter dropout when configured.
    pub train: bool,
    /// Detaches every parameter so no autograd graph is built.
    pub no_grad: bool,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn training() -> Self {
        Self {
            train: true,
            ..Self::default()
        }
    }
}

/// Which parameter groups take part in autograd for one forward pass.
#[derive(Clone, Copy)]
struct Tracking {
    base: bool,
    adapters: bool,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[batch, embed_dim]` normalised CLS representation.
    pub pooled: Tensor,
    /// `[batch, tokens, embed_dim]` final hidden states before the output norm.
    pub tokens: Tensor,
    /// `(layer, probs)` with `probs: [batch, heads, tokens, tokens]`.
    pub attentions: Vec<(usize, Tensor)>,
}

/// A pair of low-rank factors for one projection.
#[derive(Debug, Clone)]
pub struct LoraPair {
    /// `[embed_dim, rank]`
    pub down: Var,
    /// `[rank, embed_dim]`
    pub up: Var,
}

/// Pretrained vision transformer plus injected adapters and a freeze policy.
pub struct AdaptedEncoder {
    id: BackboneId,
    arch: VitArchitecture,
    source: WeightSource,
    base: BTreeMap<String, Var>,
    adapters: Vec<BTreeMap<Projection, LoraPair>>,
    lora: LoraConfig,
    projections: BTreeSet<Projection>,
    policy: FreezePolicy,
}

impl std::fmt::Debug for AdaptedEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdaptedEncoder")
            .field("id", &self.id.to_string())
            .field("lora", &self.lora)
            .field("policy", &self.policy)
            .finish_non_exhaustive()
    }
}

impl AdaptedEncoder {
    /// Loads the base weights and attaches zero-output adapters.
    ///
    /// `down` factors are drawn from `N(0, init_scale²)` with `seed`; `up`
    /// factors start at zero, so the adapted encoder initially reproduces
    /// the base encoder.
    pub fn inject_lora(
        id: BackboneId,
        source: &WeightSource,
        lora: &LoraConfig,
        seed: u64,
    ) -> Result<Self> {
        let projections = lora.projections(&id.to_string())?;
        let arch = id.architecture();
        let weights = weights::materialize(&id, &arch, source)?;
        let base = arch
            .param_shapes()
            .into_iter()
            .map(|(name, _)| {
                let t = weights
                    .get(&name)
                    .ok_or_else(|| Error::UnknownBackbone(format!("{id}: missing `{name}`")))?;
                Ok((name, Var::from_tensor(t)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, lora.init_scale as f32)
            .map_err(|e| Error::config("lora.init_scale", e.to_string()))?;
        let (d, r) = (arch.embed_dim, lora.rank);
        let dev = Device::Cpu;
        let mut adapters = Vec::with_capacity(arch.num_layers);
        for _ in 0..arch.num_layers {
            let mut layer = BTreeMap::new();
            for &p in &projections {
                let down: Vec<f32> = (0..d * r).map(|_| normal.sample(&mut rng)).collect();
                let down = Var::from_tensor(&Tensor::from_vec(down, (d, r), &dev)?)?;
                let up = Var::zeros((r, d), DType::F32, &dev)?;
                layer.insert(p, LoraPair { down, up });
            }
            adapters.push(layer);
        }

        Ok(Self {
            id,
            arch,
            source: source.clone(),
            base,
            adapters,
            lora: lora.clone(),
            projections,
            policy: FreezePolicy::LoraOnly,
        })
    }

    /// A copy of the encoder with every weight cast to `dtype`.
    ///
    /// Inputs to [`forward`](Self::forward) must then use the same dtype.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let cast = |v: &Var| -> Result<Var> { Ok(Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?) };
        Ok(Self {
            base: self
                .base
                .iter()
                .map(|(k, v)| Ok((k.clone(), cast(v)?)))
                .collect::<Result<_>>()?,
            adapters: self
                .adapters
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|(p, pair)| {
                            Ok((
                                *p,
                                LoraPair {
                                    down: cast(&pair.down)?,
                                    up: cast(&pair.up)?,
                                },
                            ))
                        })
                        .collect::<Result<_>>()
                })
                .collect::<Result<_>>()?,
            id: self.id,
            arch: self.arch,
            source: self.source.clone(),
            lora: self.lora.clone(),
            projections: self.projections.clone(),
            policy: self.policy,
        })
    }

    pub fn id(&self) -> BackboneId {
        self.id
    }

    pub fn architecture(&self) -> &VitArchitecture {
        &self.arch
    }

    pub fn weight_source(&self) -> &WeightSource {
        &self.source
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.lora
    }

    pub fn projections(&self) -> &BTreeSet<Projection> {
        &self.projections
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        self.policy
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) {
        self.policy = policy;
    }

    pub fn base_trainable(&self) -> bool {
        self.policy == FreezePolicy::FullFinetune
    }

    pub fn adapters_trainable(&self) -> bool {
        self.policy != FreezePolicy::FrozenBackbone
    }

    /// Changes the adapter scaling without touching the factors.
    pub fn set_lora_alpha(&mut self, alpha: f64) -> Result<()> {
        let mut cfg = self.lora.clone();
        cfg.alpha = alpha;
        cfg.validate()?;
        self.lora = cfg;
        Ok(())
    }

    pub fn adapter(&self, layer: usize, projection: Projection) -> Option<&LoraPair> {
        self.adapters.get(layer)?.get(&projection)
    }

    /// Base weights with their trainability flag.
    pub fn base_params(&self) -> impl Iterator<Item = (&str, &Var, bool)> {
        let t = self.base_trainable();
        self.base.iter().map(move |(k, v)| (k.as_str(), v, t))
    }

    /// Adapter factors as `(name, var, trainable)`.
    pub fn adapter_params(&self) -> Vec<(String, &Var, bool)> {
        let t = self.adapters_trainable();
        let mut out = Vec::new();
        for (i, layer) in self.adapters.iter().enumerate() {
            for (p, pair) in layer {
                out.push((format!("layers.{i}.self_attn.{p}.lora_down"), &pair.down, t));
                out.push((format!("layers.{i}.self_attn.{p}.lora_up"), &pair.up, t));
            }
        }
        out
    }

    /// Variables the optimizer should update under the current policy.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut vars: Vec<Var> = Vec::new();
        if self.base_trainable() {
            vars.extend(self.base.values().cloned());
        }
        if self.adapters_trainable() {
            vars.extend(self.adapter_params().into_iter().map(|(_, v, _)| v.clone()));
        }
        vars
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapter_params()
            .iter()
            .map(|(_, v, _)| v.elem_count())
            .sum()
    }

    pub fn base_param_count(&self) -> usize {
        self.base.values().map(|v| v.elem_count()).sum()
    }

    /// Encoder parameters currently marked trainable.
    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        if self.base_trainable() {
            n += self.base_param_count();
        }
        if self.adapters_trainable() {
            n += self.adapter_param_count();
        }
        n
    }

    /// SHA-256 over every base weight's name and raw bits.
    pub fn base_checksum(&self) -> Result<String> {
        checksum(self.base.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }

    pub fn adapter_checksum(&self) -> Result<String> {
        let params = self.adapter_params();
        checksum(params.iter().map(|(k, v, _)| (k.as_str(), v.as_tensor())))
    }

    /// Deep copies of the adapter factors.
    pub fn adapter_tensors(&self) -> Result<HashMap<String, Tensor>> {
        self.adapter_params()
            .into_iter()
            .map(|(k, v, _)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    /// Deep copies of the base weights.
    pub fn base_tensors(&self) -> Result<HashMap<String, Tensor>> {
        self.base
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites adapter factors; every adapter must be present.
    pub fn load_adapter_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var, _) in self.adapter_params() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Shape(format!("missing adapter tensor `{name}`")))?;
            assign(var, t, &name)?;
        }
        Ok(())
    }

    /// Overwrites base weights; every base weight must be present.
    pub fn load_base_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.base {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing base tensor `{name}`")))?;
            assign(var, t, name)?;
        }
        Ok(())
    }

    fn tracking(&self, opts: &ForwardOptions) -> Tracking {
        Tracking {
            base: self.base_trainable() && !opts.no_grad,
            adapters: self.adapters_trainable() && !opts.no_grad,
        }
    }

    fn param(&self, g: Tracking, name: &str) -> Tensor {
        let var = &self.base[name];
        if g.base {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        }
    }

    fn adapter_factor(&self, g: Tracking, var: &Var) -> Tensor {
        if g.adapters {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        }
    }

    /// Embeds a `[batch, 3, 224, 224]` normalised image batch without
    /// building an autograd graph.
    pub fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        Ok(self.forward(pixels, &ForwardOptions::inference())?.pooled)
    }

    pub fn forward(&self, pixels: &Tensor, opts: &ForwardOptions) -> Result<EncoderOutput> {
        let a = &self.arch;
        let (b, c, h, w) = pixels.dims4().map_err(|_| {
            Error::Shape(format!(
                "expected [batch, 3, {s}, {s}] pixels, got {:?}",
                pixels.dims(),
                s = a.image_size
            ))
        })?;
        if c != 3 || h != a.image_size || w != a.image_size {
            return Err(Error::Shape(format!(
                "expected [batch, 3, {s}, {s}] pixels, got {:?}",
                pixels.dims(),
                s = a.image_size
            )));
        }
        if let Some(mask) = opts.mask {
            self.check_head(mask.head)?;
        }
        let (d, p, grid) = (a.embed_dim, a.patch_size, a.grid_size());
        let eps = a.family.layer_norm_eps();
        let g = self.tracking(opts);

        let patches = pixels
            .reshape((b, 3, grid, p, grid, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, grid * grid, 3 * p * p))?;
        let patch_w = self
            .param(g, "embeddings.patch_embedding.weight")
            .reshape((d, 3 * p * p))?;
        let emb = ops::linear(&patches, &patch_w, None)?;
        let cls = self
            .param(g, "embeddings.class_embedding")
            .reshape((1, 1, d))?
            .broadcast_as((b, 1, d))?;
        let mut x = Tensor::cat(&[&cls, &emb], 1)?
            .broadcast_add(&self.param(g, "embeddings.position_embedding"))?;
        if a.family.has_pre_norm() {
            x = ops::layer_norm(
                &x,
                &self.param(g, "pre_layernorm.weight"),
                &self.param(g, "pre_layernorm.bias"),
                eps,
            )?;
        }

        let mut attentions = Vec::new();
        for layer in 0..a.num_layers {
            let (next, probs) = self.block(layer, &x, opts)?;
            x = next;
            let keep = match opts.record {
                RecordAttention::All => true,
                RecordAttention::Layer(l) => l == layer,
                RecordAttention::None => false,
            };
            if keep {
                attentions.push((layer, probs));
            }
        }

        let cls_out = x.narrow(1, 0, 1)?.squeeze(1)?;
        let pooled = ops::layer_norm(
            &cls_out,
            &self.param(g, "post_layernorm.weight"),
            &self.param(g, "post_layernorm.bias"),
            eps,
        )?;
        Ok(EncoderOutput {
            pooled,
            tokens: x,
            attentions,
        })
    }

    pub fn check_head(&self, head: HeadId) -> Result<()> {
        if head.layer >= self.arch.num_layers || head.head >= self.arch.num_heads {
            return Err(Error::InvalidHead {
                layer: head.layer,
                head: head.head,
                layers: self.arch.num_layers,
                heads: self.arch.num_heads,
            });
        }
        Ok(())
    }

    /// Output of one attention input projection for hidden states `x`,
    /// optionally including the adapter branch.
    pub fn projection_output(
        &self,
        layer: usize,
        projection: Projection,
        x: &Tensor,
        with_adapter: bool,
    ) -> Result<Tensor> {
        let d = self.arch.embed_dim;
        let g = self.tracking(&ForwardOptions::default());
        let l = format!("layers.{layer}.self_attn.qkv");
        let off = projection.slice_index() * d;
        let w = self.param(g, &format!("{l}.weight")).narrow(0, off, d)?;
        let bias = self.param(g, &format!("{l}.bias")).narrow(0, off, d)?;
        let mut out = ops::linear(x, &w, Some(&bias))?;
        if with_adapter {
            if let Some(delta) = self.adapter_delta(g, layer, projection, x, false)? {
                out = (out + delta)?;
            }
        }
        Ok(out)
    }

    fn adapter_delta(
        &self,
        g: Tracking,
        layer: usize,
        projection: Projection,
        x: &Tensor,
        train: bool,
    ) -> Result<Option<Tensor>> {
        let Some(pair) = self.adapters[layer].get(&projection) else {
            return Ok(None);
        };
        let x = if train && self.lora.dropout > 0.0 {
            candle_nn::ops::dropout(x, self.lora.dropout as f32)?
        } else {
            x.clone()
        };
        let (b, t, d) = x.dims3()?;
        let down = self.adapter_factor(g, &pair.down);
        let up = self.adapter_factor(g, &pair.up);
        let delta = x
            .reshape((b * t, d))?
            .matmul(&down)?
            .matmul(&up)?
            .affine(self.lora.scaling(), 0.0)?
            .reshape((b, t, d))?;
        Ok(Some(delta))
    }

    fn block(&self, layer: usize, x: &Tensor, opts: &ForwardOptions) -> Result<(Tensor, Tensor)> {
        let a = &self.arch;
        let (b, t, d) = x.dims3()?;
        let (nh, hd) = (a.num_heads, a.head_dim());
        let eps = a.family.layer_norm_eps();
        let g = self.tracking(opts);
        let l = format!("layers.{layer}");

        let hidden = ops::layer_norm(
            x,
            &self.param(g, &format!("{l}.layer_norm1.weight")),
            &self.param(g, &format!("{l}.layer_norm1.bias")),
            eps,
        )?;
        let qkv = ops::linear(
            &hidden,
            &self.param(g, &format!("{l}.self_attn.qkv.weight")),
            Some(&self.param(g, &format!("{l}.self_attn.qkv.bias"))),
        )?;
        let mut parts = Vec::with_capacity(3);
        for p in Projection::ALL {
            let mut part = qkv.narrow(2, p.slice_index() * d, d)?;
            if !opts.bypass_adapters {
                if let Some(delta) = self.adapter_delta(g, layer, p, &hidden, opts.train)? {
                    part = (part + delta)?;
                }
            }
            let part = part.reshape((b, t, nh, hd))?.transpose(1, 2)?.contiguous()?;
            parts.push(part);
        }
        let (q, k, v) = (&parts[0], &parts[1], &parts[2]);

        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let mut probs = ops::softmax_last_dim(&scores)?;
        if let Some(mask) = opts.mask.filter(|m| m.head.layer == layer) {
            probs = apply_uniform_mask(&probs, &mask)?;
        }
        let ctx = probs
            .matmul(v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        let attn_out = ops::linear(
            &ctx,
            &self.param(g, &format!("{l}.self_attn.out_proj.weight")),
            Some(&self.param(g, &format!("{l}.self_attn.out_proj.bias"))),
        )?;
        let x = (x + attn_out)?;

        let hidden = ops::layer_norm(
            &x,
            &self.param(g, &format!("{l}.layer_norm2.weight")),
            &self.param(g, &format!("{l}.layer_norm2.bias")),
            eps,
        )?;
        let hidden = ops::linear(
            &hidden,
            &self.param(g, &format!("{l}.mlp.fc1.weight")),
            Some(&self.param(g, &format!("{l}.mlp.fc1.bias"))),
        )?;
        let hidden = ops::activate(&hidden, a.family.activation())?;
        let hidden = ops::linear(
            &hidden,
            &self.param(g, &format!("{l}.mlp.fc2.weight")),
            Some(&self.param(g, &format!("{l}.mlp.fc2.bias"))),
        )?;
        Ok(((x + hidden)?, probs))
    }
}

/// Replaces the selected rows of one head with a uniform distribution.
fn apply_uniform_mask(probs: &Tensor, mask: &HeadMask) -> Result<Tensor> {
    let (_, nh, t, _) = probs.dims4()?;
    let mut keep = vec![1f64; nh * t * t];
    let mut fill = vec![0f64; nh * t * t];
    let rows = match mask.scope {
        MaskScope::ClsRow => 0..1,
        MaskScope::FullMatrix => 0..t,
    };
    let (first, support) = if mask.exclude_cls { (1, t - 1) } else { (0, t) };
    let w = 1.0 / support as f64;
    let base = mask.head.head * t * t;
    for r in rows {
        for c in 0..t {
            keep[base + r * t + c] = 0.0;
            if c >= first {
                fill[base + r * t + c] = w;
            }
        }
    }
    let dev = probs.device();
    let keep = Tensor::from_vec(keep, (1, nh, t, t), dev)?.to_dtype(probs.dtype())?;
    let fill = Tensor::from_vec(fill, (1, nh, t, t), dev)?.to_dtype(probs.dtype())?;
    Ok(probs.broadcast_mul(&keep)?.broadcast_add(&fill)?)
}

fn assign(var: &Var, t: &Tensor, name: &str) -> Result<()> {
    if var.dims() != t.dims() {
        return Err(Error::Shape(format!(
            "`{name}`: stored shape {:?} does not match model shape {:?}",
            t.dims(),
            var.dims()
        )));
    }
    var.set(&t.to_dtype(var.dtype())?)?;
    Ok(())
}

pub(crate) fn checksum<'a>(params: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        for x in v {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Max-abs difference between two tensors, in f64.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .abs()?
        .flatten_all()?
        .max(D::Minus1)?
        .to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> AdaptedEncoder {
        AdaptedEncoder::inject_lora(
            BackboneId::CLIP_MICRO_32,
            &WeightSource::Random { seed: 0 },
            &LoraConfig::default(),
            1,
        )
        .unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0f32, 1.0).unwrap();
        let v: Vec<f32> = (0..n * 3 * 224 * 224).map(|_| normal.sample(&mut rng)).collect();
        Tensor::from_vec(v, (n, 3, 224, 224), &dev).unwrap()
    }

    fn perturb_up(enc: &AdaptedEncoder, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0f32, 0.05).unwrap();
        for layer in &enc.adapters {
            for pair in layer.values() {
                let n = pair.up.elem_count();
                let v: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                pair.up
                    .set(&Tensor::from_vec(v, pair.up.dims(), &Device::Cpu).unwrap())
                    .unwrap();
            }
        }
    }

    #[test]
    fn adapter_count_follows_closed_form() {
        let enc = micro();
        let a = enc.architecture();
        assert_eq!(enc.adapter_param_count(), a.num_layers * 3 * 2 * a.embed_dim * 16);

        let mut cfg = LoraConfig::default();
        cfg.rank = 4;
        cfg.targets = vec!["query".into(), "value".into()];
        let enc = AdaptedEncoder::inject_lora(
            BackboneId::CLIP_MICRO_32,
            &WeightSource::Zeros,
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!(enc.adapter_param_count(), 2 * 2 * 2 * 64 * 4);
        assert!(enc.adapter(0, Projection::Key).is_none());
    }

    #[test]
    fn base_param_count_matches_shapes() {
        let enc = micro();
        assert_eq!(enc.base_param_count(), enc.architecture().base_param_count());
    }

    #[test]
    fn freeze_policies_set_flags() {
        let mut enc = micro();
        assert!(enc.base_params().all(|(_, _, t)| !t));
        assert!(enc.adapter_params().iter().all(|(_, _, t)| *t));
        assert_eq!(enc.trainable_param_count(), enc.adapter_param_count());

        enc.set_freeze_policy(FreezePolicy::FullFinetune);
        assert!(enc.base_params().all(|(_, _, t)| t));
        assert_eq!(
            enc.trainable_param_count(),
            enc.adapter_param_count() + enc.base_param_count()
        );

        enc.set_freeze_policy(FreezePolicy::FrozenBackbone);
        assert!(enc.adapter_params().iter().all(|(_, _, t)| !t));
        assert_eq!(enc.trainable_param_count(), 0);
        assert!(enc.trainable_vars().is_empty());
    }

    #[test]
    fn zero_init_matches_base() {
        let enc = micro();
        let x = images(2, 5);
        let adapted = enc.encode(&x).unwrap();
        let base = enc
            .forward(
                &x,
                &ForwardOptions {
                    bypass_adapters: true,
                    ..Default::default()
                },
            )
            .unwrap()
            .pooled;
        assert_eq!(adapted.dims(), &[2, 64]);
        assert!(max_abs_diff(&adapted, &base).unwrap() <= 1e-5);
    }

    #[test]
    fn nonzero_adapter_changes_output() {
        let enc = micro();
        perturb_up(&enc, 9);
        let x = images(1, 5);
        let adapted = enc.encode(&x).unwrap();
        let base = enc
            .forward(
                &x,
                &ForwardOptions {
                    bypass_adapters: true,
                    ..Default::default()
                },
            )
            .unwrap()
            .pooled;
        assert!(max_abs_diff(&adapted, &base).unwrap() > 1e-4);
    }

    #[test]
    fn adapter_delta_is_linear_in_alpha() {
        let mut enc = micro();
        perturb_up(&enc, 2);
        let x = Tensor::randn(0f32, 1.0, (2, 5, 64), &Device::Cpu).unwrap();
        for p in Projection::ALL {
            let base = enc.projection_output(1, p, &x, false).unwrap();
            enc.set_lora_alpha(8.0).unwrap();
            let d1 = (enc.projection_output(1, p, &x, true).unwrap() - &base).unwrap();
            enc.set_lora_alpha(16.0).unwrap();
            let d2 = (enc.projection_output(1, p, &x, true).unwrap() - &base).unwrap();
            let doubled = (d1 * 2.0).unwrap();
            let scale = d2.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() as f64;
            assert!(scale > 0.0);
            assert!(max_abs_diff(&doubled, &d2).unwrap() <= 1e-5 * scale.max(1.0));
        }
    }

    #[test]
    fn encode_rejects_wrong_resolution() {
        let enc = micro();
        let x = Tensor::zeros((1, 3, 200, 200), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&x), Err(Error::Shape(_))));
        let x = Tensor::zeros((1, 1, 224, 224), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicated_input_gives_identical_rows() {
        let enc = micro();
        let one = images(1, 11);
        let x = Tensor::cat(&[&one, &one], 0).unwrap();
        let out = enc.encode(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn masked_rows_stay_stochastic() {
        let enc = micro();
        let x = images(1, 3);
        for scope in [MaskScope::ClsRow, MaskScope::FullMatrix] {
            for exclude_cls in [false, true] {
                let out = enc
                    .forward(
                        &x,
                        &ForwardOptions {
                            mask: Some(HeadMask {
                                head: HeadId::new(1, 2),
                                scope,
                                exclude_cls,
                            }),
                            record: RecordAttention::All,
                            ..Default::default()
                        },
                    )
                    .unwrap();
                for (_, probs) in &out.attentions {
                    let sums = probs
                        .sum(D::Minus1)
                        .unwrap()
                        .flatten_all()
                        .unwrap()
                        .to_vec1::<f32>()
                        .unwrap();
                    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
                }
                let probs = &out.attentions[1].1;
                let row = probs.get(0).unwrap().get(2).unwrap().get(0).unwrap();
                let row = row.to_vec1::<f32>().unwrap();
                let t = row.len() as f32;
                if exclude_cls {
                    assert_eq!(row[0], 0.0);
                    assert!(row[1..].iter().all(|&w| w == 1.0 / (t - 1.0)));
                } else {
                    assert!(row.iter().all(|&w| w == 1.0 / t));
                }
            }
        }
    }

    #[test]
    fn invalid_head_is_rejected() {
        let enc = micro();
        let x = images(1, 3);
        let err = enc
            .forward(
                &x,
                &ForwardOptions {
                    mask: Some(HeadMask::cls_row(HeadId::new(2, 0))),
                    ..Default::default()
                },
            )
            .unwrap_err();
        assert!(matches!(err, Error::InvalidHead { .. }));
    }

    #[test]
    fn frozen_backbone_yields_no_encoder_gradient() {
        let mut enc = micro();
        enc.set_freeze_policy(FreezePolicy::FrozenBackbone);
        let x = images(2, 4);
        let out = enc.forward(&x, &ForwardOptions::training()).unwrap().pooled;
        let probe = Var::ones(64, DType::F32, &Device::Cpu).unwrap();
        let loss = out.broadcast_mul(probe.as_tensor()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(probe.as_tensor()).is_some());
        for (_, v, _) in enc.base_params() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
        for (_, v, _) in enc.adapter_params() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
    }

    #[test]
    fn lora_only_gradient_reaches_adapters_only() {
        let enc = micro();
        perturb_up(&enc, 1);
        let x = images(2, 4);
        let loss = enc.forward(&x, &ForwardOptions::training()).unwrap().pooled.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for (_, v, _) in enc.base_params() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
        for (name, v, _) in enc.adapter_params() {
            let g = grads.get(v.as_tensor()).unwrap_or_else(|| panic!("{name}"));
            assert!(g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0);
        }
    }
}
