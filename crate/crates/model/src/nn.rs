//! Layers written on primitive tensor ops so every one of them has a
//! backward pass.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::Linear;

use crate::error::Result;
use crate::params::{ForwardCtx, Init, ParamBuilder};

/// Additive bias for masked attention keys.
pub const MASK_NEG: f64 = -1e9;

/// `nn.Linear`-style layer with PyTorch's default uniform initialization.
pub fn linear(vb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let weight = vb.get(&[out_dim, in_dim], "weight", Init::Uniform(bound))?;
    let bias = vb.get(&[out_dim], "bias", Init::Uniform(bound))?;
    Ok(Linear::new(weight, Some(bias)))
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vb: &ParamBuilder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: vb.get_aliased(&[dim], "weight", &["gamma"], Init::Const(1.0))?,
            bias: vb.get_aliased(&[dim], "bias", &["beta"], Init::Const(0.0))?,
            eps,
        })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last dimension from primitive ops.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let exp = x.broadcast_sub(&max)?.exp()?;
    Ok(exp.broadcast_div(&exp.sum_keepdim(D::Minus1)?)?)
}

/// `(batch, frames)` 0/1 mask of valid positions.
pub fn length_mask(lengths: &[usize], frames: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let data: Vec<f64> = lengths
        .iter()
        .flat_map(|&l| (0..frames).map(move |t| if t < l { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), frames), device)?.to_dtype(dtype)?)
}

/// Multi-head self-attention with a key padding mask.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    /// `x`: `(batch, frames, hidden)`; `key_bias`: `(batch, 1, 1, frames)`
    /// with 0 for valid keys and [`MASK_NEG`] for padding.
    pub fn forward(&self, x: &Tensor, key_bias: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let head_dim = d / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, head_dim))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (head_dim as f64).sqrt())?;
        let probs = softmax_last(&scores.broadcast_add(key_bias)?)?;
        let probs = ctx.dropout(&probs)?;
        let ctx_out = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        Ok(self.out.forward(&ctx_out)?)
    }
}

/// Key bias `(batch, 1, 1, frames)` from valid lengths.
pub fn key_bias(lengths: &[usize], frames: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mask = length_mask(lengths, frames, dtype, device)?;
    let bias = ((mask - 1.0)? * -MASK_NEG)?;
    Ok(bias.reshape((lengths.len(), 1, 1, frames))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamSource, ParamStore};
    use candle_core::Device;
    use std::cell::RefCell;

    #[test]
    fn layer_norm_matches_hand_computation() {
        let store = RefCell::new(ParamStore::new(DType::F64, Device::Cpu));
        let source = ParamSource::Random { seed: 0 };
        let ln = LayerNorm::new(&ParamBuilder::new(&store, &source), 4, 1e-5).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean = 3.0;
        let var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
        for (i, v) in [1.0, 2.0, 3.0, 6.0].iter().enumerate() {
            assert!((y[0][i] - (v - mean) / (var + 1e-5f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, -3.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let y = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in y {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn key_bias_masks_padding() {
        let b = key_bias(&[2, 3], 3, DType::F64, &Device::Cpu).unwrap();
        let v = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![0.0, 0.0, MASK_NEG, 0.0, 0.0, 0.0]);
    }
}
