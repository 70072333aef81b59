//! A one-layer, one-head transformer with hand-set weights and a plain
//! f64 loop implementation of its forward pass.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor};
use perceptlab::backbone::{AdaptedEncoder, BackboneId, LoraConfig, WeightSource};

pub const TOY_ID: &str = "clip-vit-toy-112";
const D: usize = 8;
const P: usize = 112;
const G: usize = 2;
const T: usize = G * G + 1;
const MLP: usize = 16;
const S: usize = 224;
const EPS: f64 = 1e-5;

/// Weight `k` of tensor number `n`: a fixed trigonometric pattern.
fn value(n: usize, k: usize, scale: f64) -> f64 {
    scale * (1.3 * k as f64 + 0.7 * n as f64 + 0.1).sin()
}

/// Every base weight of the toy model as flat row-major vectors.
pub fn weights() -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
    let l = "layers.0";
    let specs: Vec<(String, Vec<usize>, f64, f64)> = vec![
        ("embeddings.patch_embedding.weight".into(), vec![D, 3, P, P], 0.0, 0.01),
        ("embeddings.class_embedding".into(), vec![D], 0.0, 0.5),
        ("embeddings.position_embedding".into(), vec![T, D], 0.0, 0.3),
        ("pre_layernorm.weight".into(), vec![D], 1.0, 0.1),
        ("pre_layernorm.bias".into(), vec![D], 0.0, 0.05),
        (format!("{l}.layer_norm1.weight"), vec![D], 1.0, 0.1),
        (format!("{l}.layer_norm1.bias"), vec![D], 0.0, 0.05),
        (format!("{l}.self_attn.qkv.weight"), vec![3 * D, D], 0.0, 0.6),
        (format!("{l}.self_attn.qkv.bias"), vec![3 * D], 0.0, 0.1),
        (format!("{l}.self_attn.out_proj.weight"), vec![D, D], 0.0, 0.4),
        (format!("{l}.self_attn.out_proj.bias"), vec![D], 0.0, 0.05),
        (format!("{l}.layer_norm2.weight"), vec![D], 1.0, 0.1),
        (format!("{l}.layer_norm2.bias"), vec![D], 0.0, 0.05),
        (format!("{l}.mlp.fc1.weight"), vec![MLP, D], 0.0, 0.4),
        (format!("{l}.mlp.fc1.bias"), vec![MLP], 0.0, 0.1),
        (format!("{l}.mlp.fc2.weight"), vec![D, MLP], 0.0, 0.3),
        (format!("{l}.mlp.fc2.bias"), vec![D], 0.0, 0.05),
        ("post_layernorm.weight".into(), vec![D], 1.0, 0.1),
        ("post_layernorm.bias".into(), vec![D], 0.0, 0.05),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(n, (name, shape, offset, scale))| {
            let len: usize = shape.iter().product();
            let v = (0..len).map(|k| offset + value(n, k, scale)).collect();
            (name, (shape, v))
        })
        .collect()
}

/// The toy encoder in f64 with [`weights`] loaded.
pub fn encoder() -> AdaptedEncoder {
    let id: BackboneId = TOY_ID.parse().unwrap();
    let lora = LoraConfig {
        rank: 4,
        ..LoraConfig::default()
    };
    let enc = AdaptedEncoder::inject_lora(id, &WeightSource::Zeros, &lora, 0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap();
    let tensors: HashMap<String, Tensor> = weights()
        .into_iter()
        .map(|(k, (shape, v))| (k, Tensor::from_vec(v, shape, &Device::Cpu).unwrap()))
        .collect();
    enc.load_base_tensors(&tensors).unwrap();
    enc
}

/// A fixed `[3, 224, 224]` input pattern, channel-major.
pub fn pixels() -> Vec<f64> {
    (0..3 * S * S)
        .map(|i| {
            let (c, y, x) = (i / (S * S), (i / S) % S, i % S);
            (0.05 * x as f64 + 0.11 * y as f64 + 1.7 * c as f64).sin() + 0.2 * c as f64
        })
        .collect()
}

pub fn pixel_tensor() -> Tensor {
    Tensor::from_vec(pixels(), (1, 3, S, S), &Device::Cpu).unwrap()
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + EPS).sqrt();
    x.iter().zip(w).zip(b).map(|((v, w), b)| (v - mean) * inv * w + b).collect()
}

/// `w · x + b` for a row-major `[out, in]` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bias)| bias + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

/// Pooled CLS output; with `mask` the CLS query's attention row becomes
/// uniform over all tokens.
pub fn oracle_forward(mask: bool) -> Vec<f64> {
    let w = weights();
    let get = |name: &str| &w[name].1;
    let px = pixels();

    let mut tokens: Vec<Vec<f64>> = vec![get("embeddings.class_embedding").clone()];
    let patch_w = get("embeddings.patch_embedding.weight");
    for gy in 0..G {
        for gx in 0..G {
            let mut feat = Vec::with_capacity(3 * P * P);
            for c in 0..3 {
                for py in 0..P {
                    for pxi in 0..P {
                        feat.push(px[c * S * S + (gy * P + py) * S + gx * P + pxi]);
                    }
                }
            }
            tokens.push(affine(patch_w, &[0.0; D], &feat));
        }
    }
    let pos = get("embeddings.position_embedding");
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| {
            let row: Vec<f64> = tok.iter().zip(&pos[t * D..(t + 1) * D]).map(|(a, b)| a + b).collect();
            layer_norm(&row, get("pre_layernorm.weight"), get("pre_layernorm.bias"))
        })
        .collect();

    let l = "layers.0";
    let h: Vec<Vec<f64>> = x
        .iter()
        .map(|r| layer_norm(r, get(&format!("{l}.layer_norm1.weight")), get(&format!("{l}.layer_norm1.bias"))))
        .collect();
    let qkv: Vec<Vec<f64>> = h
        .iter()
        .map(|r| affine(get(&format!("{l}.self_attn.qkv.weight")), get(&format!("{l}.self_attn.qkv.bias")), r))
        .collect();
    let scale = 1.0 / (D as f64).sqrt();
    let mut probs = vec![vec![0.0; T]; T];
    for i in 0..T {
        let scores: Vec<f64> = (0..T)
            .map(|j| (0..D).map(|e| qkv[i][e] * qkv[j][D + e]).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exp.iter().sum();
        probs[i] = exp.iter().map(|e| e / z).collect();
    }
    if mask {
        probs[0] = vec![1.0 / T as f64; T];
    }
    for i in 0..T {
        let ctx: Vec<f64> = (0..D).map(|e| (0..T).map(|j| probs[i][j] * qkv[j][2 * D + e]).sum()).collect();
        let out = affine(
            get(&format!("{l}.self_attn.out_proj.weight")),
            get(&format!("{l}.self_attn.out_proj.bias")),
            &ctx,
        );
        for e in 0..D {
            x[i][e] += out[e];
        }
    }
    for r in x.iter_mut() {
        let h2 = layer_norm(r, get(&format!("{l}.layer_norm2.weight")), get(&format!("{l}.layer_norm2.bias")));
        let f: Vec<f64> = affine(get(&format!("{l}.mlp.fc1.weight")), get(&format!("{l}.mlp.fc1.bias")), &h2)
            .into_iter()
            .map(|v| v / (1.0 + (-1.702 * v).exp()))
            .collect();
        let o = affine(get(&format!("{l}.mlp.fc2.weight")), get(&format!("{l}.mlp.fc2.bias")), &f);
        for e in 0..D {
            r[e] += o[e];
        }
    }
    layer_norm(&x[0], get("post_layernorm.weight"), get("post_layernorm.bias"))
}
