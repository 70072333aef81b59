//! Tensor primitives used by the encoder forward pass.
//!
//! Fused kernels are used whenever no operand takes part in autograd; the
//! differentiable fallbacks are built from elementary ops.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Result, Shape, Storage, Tensor, D};

use super::arch::Activation;

/// `lhs · rhsᵀ` where `rhs` never receives a gradient.
///
/// Autograd's generic matmul rule always materialises both operand
/// gradients; for a frozen weight only the input gradient is needed.
struct FrozenWeightMatmul {
    /// `[out, in]`
    weight: Tensor,
}

impl CustomOp1 for FrozenWeightMatmul {
    fn name(&self) -> &'static str {
        "frozen-weight-matmul"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (m, k) = layout.shape().dims2()?;
        let rhs = self.weight.t()?;
        let (n, k2) = self.weight.dims2()?;
        if k != k2 {
            candle_core::bail!("frozen matmul: input width {k} != weight width {k2}");
        }
        let (rhs_storage, rhs_layout) = rhs.storage_and_layout();
        let Storage::Cpu(rhs_cpu) = &*rhs_storage else {
            candle_core::bail!("frozen matmul: weight is not on the cpu");
        };
        let out = storage.matmul(rhs_cpu, (1, m, n, k), layout, rhs_layout)?;
        Ok((out, Shape::from((m, n))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.matmul(&self.weight)?))
    }
}

/// Affine map over the last axis: `x · wᵀ + b` with `w: [out, in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (last, lead) = dims.split_last().expect("linear input has rank >= 1");
    let rows: usize = lead.iter().product();
    let flat = x.reshape((rows, *last))?;
    let out = if !weight.track_op() && flat.track_op() {
        flat.contiguous()?.apply_op1(FrozenWeightMatmul {
            weight: weight.clone(),
        })
    } else {
        flat.matmul(&weight.t()?)
    }?;
    let out = match bias {
        Some(b) => out.broadcast_add(b)?,
        None => out,
    };
    let mut out_dims = lead.to_vec();
    out_dims.push(weight.dim(0)?);
    out.reshape(out_dims)
}

pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    // The fused kernel only exists for 32-bit floats.
    if x.dtype() == DType::F32 && !(x.track_op() || weight.track_op() || bias.track_op()) {
        return candle_nn::ops::layer_norm(&x.contiguous()?, weight, bias, eps as f32);
    }
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    normed.broadcast_mul(weight)?.broadcast_add(bias)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    if !x.track_op() {
        // Normalising in f64 keeps each f32 row within a few ulps of 1.
        return candle_nn::ops::softmax_last_dim(&x.to_dtype(DType::F64)?.contiguous()?)?.to_dtype(x.dtype());
    }
    let max = x.max_keepdim(D::Minus1)?.detach();
    let exp = x.broadcast_sub(&max)?.exp()?;
    exp.broadcast_div(&exp.sum_keepdim(D::Minus1)?)
}

pub fn activate(x: &Tensor, activation: Activation) -> Result<Tensor> {
    match activation {
        Activation::QuickGelu => x.mul(&candle_nn::ops::sigmoid(&(x * 1.702)?)?),
        Activation::Gelu => x.gelu_erf(),
    }
}
