//! Speech transformer with a strided convolutional frontend, parameter names
//! matching the Hugging Face wav2vec 2.0 / HuBERT checkpoints.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use super::spec::{AudioConfig, FeatureNorm};
use crate::error::Result;
use crate::nn::{key_bias, length_mask, linear, LayerNorm, SelfAttention};
use crate::params::{ForwardCtx, Init, ParamBuilder};

/// Prefix of the convolutional feature extractor parameters.
pub const FRONTEND_PREFIXES: [&str; 1] = ["feature_extractor."];

enum ConvNorm {
    None,
    /// Per-channel statistics over valid frames.
    Group { weight: Tensor, bias: Tensor, eps: f64 },
    /// Per-frame statistics over channels.
    Layer(LayerNorm),
}

struct ConvLayer {
    weight: Tensor,
    bias: Option<Tensor>,
    norm: ConvNorm,
    kernel: usize,
    stride: usize,
}

impl ConvLayer {
    fn forward(&self, x: &Tensor, lengths: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut y = x.conv1d(&self.weight, 0, self.stride, 1, 1)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.reshape((1, (), 1))?)?;
        }
        let lengths: Vec<usize> = lengths
            .iter()
            .map(|&l| if l < self.kernel { 0 } else { (l - self.kernel) / self.stride + 1 })
            .collect();
        let y = match &self.norm {
            ConvNorm::None => y,
            ConvNorm::Group { weight, bias, eps } => {
                let (b, _, t) = y.dims3()?;
                let mask = length_mask(&lengths, t, y.dtype(), y.device())?.reshape((b, 1, t))?;
                let count = Tensor::from_vec(
                    lengths.iter().map(|&l| l.max(1) as f64).collect::<Vec<_>>(),
                    (b, 1, 1),
                    y.device(),
                )?
                .to_dtype(y.dtype())?;
                let mean = y.broadcast_mul(&mask)?.sum_keepdim(2)?.broadcast_div(&count)?;
                let centered = y.broadcast_sub(&mean)?;
                let var = centered.broadcast_mul(&mask)?.sqr()?.sum_keepdim(2)?.broadcast_div(&count)?;
                centered
                    .broadcast_div(&(var + *eps)?.sqrt()?)?
                    .broadcast_mul(&weight.reshape((1, (), 1))?)?
                    .broadcast_add(&bias.reshape((1, (), 1))?)?
            }
            ConvNorm::Layer(ln) => ln.forward(&y.transpose(1, 2)?)?.transpose(1, 2)?,
        };
        Ok((y.gelu_erf()?, lengths))
    }
}

struct FeedForward {
    intermediate: Linear,
    output: Linear,
}

impl FeedForward {
    fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = ctx.dropout(&self.intermediate.forward(x)?.gelu_erf()?)?;
        ctx.dropout(&self.output.forward(&h)?)
    }
}

struct EncoderLayer {
    attention: SelfAttention,
    layer_norm: LayerNorm,
    feed_forward: FeedForward,
    final_layer_norm: LayerNorm,
}

impl EncoderLayer {
    fn new(vb: &ParamBuilder, c: &AudioConfig) -> Result<Self> {
        let d = c.hidden_size;
        let att = vb.pp("attention");
        Ok(Self {
            attention: SelfAttention {
                q: linear(&att.pp("q_proj"), d, d)?,
                k: linear(&att.pp("k_proj"), d, d)?,
                v: linear(&att.pp("v_proj"), d, d)?,
                out: linear(&att.pp("out_proj"), d, d)?,
                heads: c.num_heads,
            },
            layer_norm: LayerNorm::new(&vb.pp("layer_norm"), d, c.layer_norm_eps)?,
            feed_forward: FeedForward {
                intermediate: linear(&vb.pp("feed_forward").pp("intermediate_dense"), d, c.intermediate_size)?,
                output: linear(&vb.pp("feed_forward").pp("output_dense"), c.intermediate_size, d)?,
            },
            final_layer_norm: LayerNorm::new(&vb.pp("final_layer_norm"), d, c.layer_norm_eps)?,
        })
    }

    fn forward_post_norm(&self, x: &Tensor, bias: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = ctx.dropout(&self.attention.forward(x, bias, ctx)?)?;
        let h = self.layer_norm.forward(&(x + h)?)?;
        let h = (&h + self.feed_forward.forward(&h, ctx)?)?;
        self.final_layer_norm.forward(&h)
    }

    fn forward_pre_norm(&self, x: &Tensor, bias: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = self.attention.forward(&self.layer_norm.forward(x)?, bias, ctx)?;
        let h = (x + ctx.dropout(&h)?)?;
        let ff = self.feed_forward.forward(&self.final_layer_norm.forward(&h)?, ctx)?;
        Ok((h + ff)?)
    }
}

/// Convolutional relative positional embedding with weight normalization
/// over the kernel axis.
struct PosConv {
    weight_g: Tensor,
    weight_v: Tensor,
    bias: Tensor,
    kernel: usize,
    groups: usize,
}

impl PosConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // ||v|| over every axis but the kernel axis.
        let norm = self.weight_v.sqr()?.sum_keepdim(0)?.sum_keepdim(1)?.sqrt()?;
        let weight = self.weight_v.broadcast_mul(&self.weight_g.broadcast_div(&norm)?)?;
        let y = x
            .transpose(1, 2)?
            .contiguous()?
            .conv1d(&weight, self.kernel / 2, 1, 1, self.groups)?;
        let y = y.broadcast_add(&self.bias.reshape((1, (), 1))?)?;
        let frames = x.dim(1)?;
        // Even kernels produce one extra frame.
        let y = y.narrow(2, 0, frames)?;
        Ok(y.gelu_erf()?.transpose(1, 2)?)
    }
}

pub(crate) struct AudioNet {
    config: AudioConfig,
    conv_layers: Vec<ConvLayer>,
    projection_norm: LayerNorm,
    projection: Linear,
    pos_conv: PosConv,
    encoder_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
}

/// Frontend output before any transformer layer.
pub(crate) struct Frontend {
    pub hidden: Tensor,
    pub lengths: Vec<usize>,
}

impl AudioNet {
    pub(crate) fn new(vb: &ParamBuilder, c: &AudioConfig, layers: usize) -> Result<Self> {
        let fe = vb.pp("feature_extractor").pp("conv_layers");
        let mut conv_layers = Vec::with_capacity(c.conv_dim.len());
        let mut in_ch = 1;
        for (i, ((&out, &k), &s)) in c.conv_dim.iter().zip(&c.conv_kernel).zip(&c.conv_stride).enumerate() {
            let lb = fe.pp(i);
            let bound = 1.0 / ((in_ch * k) as f64).sqrt();
            let weight = lb.pp("conv").get(&[out, in_ch, k], "weight", Init::Uniform(bound))?;
            let bias = if c.conv_bias {
                Some(lb.pp("conv").get(&[out], "bias", Init::Uniform(bound))?)
            } else {
                None
            };
            let norm = match c.feature_norm {
                FeatureNorm::Group if i == 0 => {
                    let nb = lb.pp("layer_norm");
                    ConvNorm::Group {
                        weight: nb.get(&[out], "weight", Init::Const(1.0))?,
                        bias: nb.get(&[out], "bias", Init::Const(0.0))?,
                        eps: 1e-5,
                    }
                }
                FeatureNorm::Group => ConvNorm::None,
                FeatureNorm::Layer => ConvNorm::Layer(LayerNorm::new(&lb.pp("layer_norm"), out, 1e-5)?),
            };
            conv_layers.push(ConvLayer { weight, bias, norm, kernel: k, stride: s });
            in_ch = out;
        }

        let d = c.hidden_size;
        let fp = vb.pp("feature_projection");
        let projection_norm = LayerNorm::new(&fp.pp("layer_norm"), in_ch, c.layer_norm_eps)?;
        let projection = linear(&fp.pp("projection"), in_ch, d)?;

        let pc = vb.pp("encoder").pp("pos_conv_embed").pp("conv");
        let per_group = d / c.pos_conv_groups;
        let k = c.pos_conv_kernel;
        let v_std = (4.0 / (k * d) as f64).sqrt();
        // Start with weight == v, as weight normalization does at creation.
        let g_init = (4.0 * d as f64 / (c.pos_conv_groups * k) as f64).sqrt();
        let pos_conv = PosConv {
            weight_g: pc.get_aliased(&[1, 1, k], "weight_g", &["parametrizations.weight.original0"], Init::Const(g_init))?,
            weight_v: pc.get_aliased(&[d, per_group, k], "weight_v", &["parametrizations.weight.original1"], Init::Normal(v_std))?,
            bias: pc.get(&[d], "bias", Init::Const(0.0))?,
            kernel: k,
            groups: c.pos_conv_groups,
        };
        let encoder_norm = LayerNorm::new(&vb.pp("encoder").pp("layer_norm"), d, c.layer_norm_eps)?;
        let lb = vb.pp("encoder").pp("layers");
        let layers = (0..layers).map(|i| EncoderLayer::new(&lb.pp(i), c)).collect::<Result<_>>()?;
        Ok(Self {
            config: c.clone(),
            conv_layers,
            projection_norm,
            projection,
            pos_conv,
            encoder_norm,
            layers,
        })
    }

    /// `samples`: `(batch, S)`, zero padded. Returns projected features
    /// `(batch, K, d)` with padded frames zeroed. `detach` cuts the graph
    /// after the convolutions.
    pub(crate) fn frontend(&self, samples: &Tensor, lengths: &[usize], detach: bool, ctx: &ForwardCtx) -> Result<Frontend> {
        let mut x = samples.unsqueeze(1)?;
        let mut lengths = lengths.to_vec();
        for layer in &self.conv_layers {
            (x, lengths) = layer.forward(&x, &lengths)?;
        }
        let x = if detach { x.detach() } else { x };
        let x = x.transpose(1, 2)?;
        let x = self.projection.forward(&self.projection_norm.forward(&x)?)?;
        let x = ctx.dropout(&x)?;
        let (b, k, _) = x.dims3()?;
        let mask = length_mask(&lengths, k, x.dtype(), x.device())?.reshape((b, k, 1))?;
        Ok(Frontend {
            hidden: x.broadcast_mul(&mask)?,
            lengths,
        })
    }

    /// All `L + 1` hidden states from the frontend output, in the
    /// Hugging Face `hidden_states` convention.
    pub(crate) fn transformer(&self, front: &Frontend, ctx: &ForwardCtx) -> Result<Vec<Tensor>> {
        let x = &front.hidden;
        let (_, k, _) = x.dims3()?;
        let bias = key_bias(&front.lengths, k, x.dtype(), x.device())?;
        let h = (x + self.pos_conv.forward(x)?)?;
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        if self.config.stable_layer_norm {
            let mut h = ctx.dropout(&h)?;
            for layer in &self.layers {
                states.push(h.clone());
                h = layer.forward_pre_norm(&h, &bias, ctx)?;
            }
            states.push(self.encoder_norm.forward(&h)?);
        } else {
            let mut h = ctx.dropout(&self.encoder_norm.forward(&h)?)?;
            states.push(h.clone());
            for layer in &self.layers {
                h = layer.forward_post_norm(&h, &bias, ctx)?;
                states.push(h.clone());
            }
        }
        Ok(states)
    }

    pub(crate) fn truncate(&mut self, keep: usize) {
        self.layers.truncate(keep);
    }
}
