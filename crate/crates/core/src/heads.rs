//! Task heads mapping pooled embeddings to scores or class logits.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ops;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Mlp,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    #[default]
    Relu,
    Gelu,
    Tanh,
}

/// Head hyperparameters as written in a run config.
///
/// `input_dim` comes from the encoder and `output_dim` from the task, so
/// neither appears here; see [`HeadShape`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default)]
    pub kind: HeadKind,
    /// Defaults to `embed_dim / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default)]
    pub activation: HeadActivation,
}

/// Fully resolved head dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activation: HeadActivation,
}

impl HeadConfig {
    pub fn resolve(&self, input_dim: usize, output_dim: usize) -> Result<HeadShape> {
        let hidden_dim = self.hidden_dim.unwrap_or(input_dim / 2);
        let shape = HeadShape {
            kind: self.kind,
            input_dim,
            hidden_dim,
            output_dim,
            activation: self.activation,
        };
        shape.validate()?;
        Ok(shape)
    }
}

impl HeadShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("head.input_dim", "must be >= 1"));
        }
        if self.output_dim == 0 {
            return Err(Error::config("head.output_dim", "must be >= 1"));
        }
        if self.kind == HeadKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::config("head.hidden_dim", "must be >= 1 for an mlp head"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            HeadKind::Mlp => {
                self.input_dim * self.hidden_dim
                    + self.hidden_dim
                    + self.hidden_dim * self.output_dim
                    + self.output_dim
            }
            HeadKind::Linear => self.input_dim * self.output_dim + self.output_dim,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        match self.kind {
            HeadKind::Mlp => vec![
                (self.hidden_dim, self.input_dim),
                (self.output_dim, self.hidden_dim),
            ],
            HeadKind::Linear => vec![(self.output_dim, self.input_dim)],
        }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    weight: Var,
    bias: Var,
}

/// A small feed-forward head: one hidden layer for `mlp`, none for `linear`.
#[derive(Debug, Clone)]
pub struct TaskHead {
    shape: HeadShape,
    layers: Vec<Dense>,
}

impl TaskHead {
    /// Uniform `±1/sqrt(fan_in)` init for weights and biases, seeded.
    pub fn new(shape: HeadShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dev = Device::Cpu;
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| {
                let bound = 1.0 / (inp as f32).sqrt();
                let mut draw = |n: usize| -> Vec<f32> {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                let w = Tensor::from_vec(draw(out * inp), (out, inp), &dev)?;
                let b = Tensor::from_vec(draw(out), out, &dev)?;
                Ok(Dense {
                    weight: Var::from_tensor(&w)?,
                    bias: Var::from_tensor(&b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { shape, layers })
    }

    pub fn shape(&self) -> &HeadShape {
        &self.shape
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.elem_count() + l.bias.elem_count())
            .sum()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    /// `[batch, input_dim]` embeddings to `[batch, output_dim]` outputs.
    pub fn forward(&self, embeddings: &Tensor) -> Result<Tensor> {
        let (_, d) = embeddings.dims2().map_err(|_| {
            Error::Shape(format!(
                "head expects [batch, {}] embeddings, got {:?}",
                self.shape.input_dim,
                embeddings.dims()
            ))
        })?;
        if d != self.shape.input_dim {
            return Err(Error::Shape(format!(
                "head expects embeddings of length {}, got {d}",
                self.shape.input_dim
            )));
        }
        let mut x = embeddings.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = ops::linear(&x, layer.weight.as_tensor(), Some(layer.bias.as_tensor()))?;
            if i < last {
                x = match self.shape.activation {
                    HeadActivation::Relu => x.relu()?,
                    HeadActivation::Gelu => x.gelu_erf()?,
                    HeadActivation::Tanh => x.tanh()?,
                };
            }
        }
        Ok(x)
    }

    /// Scalar scores for a regression head.
    pub fn predict_scores(&self, embeddings: &Tensor) -> Result<Vec<f32>> {
        if self.shape.output_dim != 1 {
            return Err(Error::TaskMismatch(format!(
                "head has {} outputs, expected a single score",
                self.shape.output_dim
            )));
        }
        Ok(self.forward(embeddings)?.squeeze(1)?.to_vec1::<f32>()?)
    }

    /// Deep copies of the current weights, safe to keep across updates.
    pub fn tensors(&self) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.insert(format!("layers.{i}.weight"), l.weight.as_tensor().copy()?);
            out.insert(format!("layers.{i}.bias"), l.bias.as_tensor().copy()?);
        }
        Ok(out)
    }

    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, var) in [("weight", &l.weight), ("bias", &l.bias)] {
                let name = format!("layers.{i}.{suffix}");
                let t = tensors
                    .get(&name)
                    .ok_or_else(|| Error::Shape(format!("missing head tensor `{name}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Shape(format!(
                        "head tensor `{name}` has shape {:?}, expected {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(DType::F32)?)?;
            }
        }
        Ok(())
    }

    pub fn checksum(&self) -> Result<String> {
        let tensors: Vec<(String, Tensor)> = {
            let mut v: Vec<_> = self.tensors()?.into_iter().collect();
            v.sort_by(|a, b| a.0.cmp(&b.0));
            v
        };
        crate::backbone::checksum(tensors.iter().map(|(k, t)| (k.as_str(), t)))
    }
}

/// Per-dataset heads sharing one encoder.
#[derive(Debug, Clone, Default)]
pub struct HeadRegistry {
    input_dim: Option<usize>,
    heads: BTreeMap<String, TaskHead>,
}

impl HeadRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, dataset_id: impl Into<String>, head: TaskHead) -> Result<()> {
        let id = dataset_id.into();
        if self.heads.contains_key(&id) {
            return Err(Error::DuplicateDataset(id));
        }
        let d = head.shape().input_dim;
        match self.input_dim {
            Some(expected) if expected != d => {
                return Err(Error::Shape(format!(
                    "head for `{id}` consumes {d}-dim embeddings, registry uses {expected}"
                )))
            }
            _ => self.input_dim = Some(d),
        }
        self.heads.insert(id, head);
        Ok(())
    }

    pub fn get(&self, dataset_id: &str) -> Result<&TaskHead> {
        self.heads
            .get(dataset_id)
            .ok_or_else(|| Error::UnknownDataset(dataset_id.to_string()))
    }

    pub fn route(&self, dataset_id: &str, embeddings: &Tensor) -> Result<Tensor> {
        self.get(dataset_id)?.forward(embeddings)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.heads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TaskHead)> {
        self.heads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.heads.values().flat_map(TaskHead::vars).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(kind: HeadKind, input: usize, output: usize) -> HeadShape {
        HeadConfig {
            kind,
            ..Default::default()
        }
        .resolve(input, output)
        .unwrap()
    }

    #[test]
    fn closed_form_parameter_counts() {
        let mlp = shape(HeadKind::Mlp, 1024, 1);
        assert_eq!(mlp.hidden_dim, 512);
        assert_eq!(mlp.param_count(), 525_313);
        assert_eq!(TaskHead::new(mlp, 0).unwrap().param_count(), 525_313);

        let lin = shape(HeadKind::Linear, 1024, 1);
        assert_eq!(lin.param_count(), 1_025);
        assert_eq!(TaskHead::new(lin, 0).unwrap().param_count(), 1_025);

        let emo = shape(HeadKind::Mlp, 1024, 8);
        assert_eq!(emo.param_count(), 528_904);
        assert_eq!(TaskHead::new(emo, 0).unwrap().param_count(), 528_904);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(HeadConfig::default().resolve(16, 0).is_err());
        let cfg = HeadConfig {
            hidden_dim: Some(0),
            ..Default::default()
        };
        assert!(cfg.resolve(16, 1).is_err());
    }

    #[test]
    fn zero_weights_output_bias() {
        let head = TaskHead::new(shape(HeadKind::Mlp, 8, 3), 1).unwrap();
        let mut t = head.tensors().unwrap();
        for (k, v) in t.iter_mut() {
            if k.ends_with("weight") {
                *v = v.zeros_like().unwrap();
            }
        }
        let bias = vec![0.5f32, -1.0, 2.0];
        t.insert(
            "layers.1.bias".into(),
            Tensor::from_vec(bias.clone(), 3, &Device::Cpu).unwrap(),
        );
        head.load_tensors(&t).unwrap();
        let x = Tensor::randn(0f32, 1.0, (4, 8), &Device::Cpu).unwrap();
        let out = head.forward(&x).unwrap().to_vec2::<f32>().unwrap();
        for row in out {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn batch_rows_are_independent_and_reproducible() {
        let head = TaskHead::new(shape(HeadKind::Mlp, 16, 1), 3).unwrap();
        let x = Tensor::randn(0f32, 1.0, (5, 16), &Device::Cpu).unwrap();
        let a = head.predict_scores(&x).unwrap();
        let b = head.predict_scores(&x).unwrap();
        assert_eq!(a, b);
        for i in 0..5 {
            let single = head.predict_scores(&x.narrow(0, i, 1).unwrap()).unwrap();
            assert!((single[0] - a[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let head = TaskHead::new(shape(HeadKind::Linear, 16, 1), 3).unwrap();
        let x = Tensor::zeros((2, 15), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(head.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn registry_routes_and_rejects_duplicates() {
        let mut reg = HeadRegistry::new();
        reg.register("a", TaskHead::new(shape(HeadKind::Mlp, 16, 1), 1).unwrap())
            .unwrap();
        reg.register("b", TaskHead::new(shape(HeadKind::Linear, 16, 1), 2).unwrap())
            .unwrap();
        assert!(matches!(
            reg.register("a", TaskHead::new(shape(HeadKind::Mlp, 16, 1), 1).unwrap()),
            Err(Error::DuplicateDataset(_))
        ));
        assert!(reg
            .register("c", TaskHead::new(shape(HeadKind::Mlp, 8, 1), 1).unwrap())
            .is_err());
        assert!(matches!(
            reg.route("zzz", &Tensor::zeros((1, 16), DType::F32, &Device::Cpu).unwrap()),
            Err(Error::UnknownDataset(_))
        ));

        // Interleaved routing equals separate forwards.
        let xa = Tensor::randn(0f32, 1.0, (3, 16), &Device::Cpu).unwrap();
        let xb = Tensor::randn(0f32, 1.0, (3, 16), &Device::Cpu).unwrap();
        let direct_a = reg.get("a").unwrap().forward(&xa).unwrap().to_vec2::<f32>().unwrap();
        let direct_b = reg.get("b").unwrap().forward(&xb).unwrap().to_vec2::<f32>().unwrap();
        let seq: Vec<_> = [("a", &xa), ("b", &xb), ("a", &xa)]
            .into_iter()
            .map(|(id, x)| reg.route(id, x).unwrap().to_vec2::<f32>().unwrap())
            .collect();
        assert_eq!(seq[0], direct_a);
        assert_eq!(seq[1], direct_b);
        assert_eq!(seq[2], direct_a);
    }

    #[test]
    fn routing_to_one_head_leaves_other_without_gradient() {
        let mut reg = HeadRegistry::new();
        reg.register("a", TaskHead::new(shape(HeadKind::Mlp, 16, 1), 1).unwrap())
            .unwrap();
        reg.register("b", TaskHead::new(shape(HeadKind::Mlp, 16, 1), 2).unwrap())
            .unwrap();
        let x = Tensor::randn(0f32, 1.0, (4, 16), &Device::Cpu).unwrap();
        let loss = reg.route("a", &x).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for v in reg.get("a").unwrap().vars() {
            assert!(grads.get(v.as_tensor()).is_some());
        }
        for v in reg.get("b").unwrap().vars() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
    }
}
