//! BERT-style text encoder with Hugging Face parameter names.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use super::spec::TextConfig;
use crate::error::Result;
use crate::nn::{key_bias, linear, LayerNorm, SelfAttention};
use crate::params::{ForwardCtx, Init, ParamBuilder};

pub const FRONTEND_PREFIXES: [&str; 1] = ["embeddings."];

struct BertLayer {
    attention: SelfAttention,
    attention_norm: LayerNorm,
    intermediate: Linear,
    output: Linear,
    output_norm: LayerNorm,
}

impl BertLayer {
    fn new(vb: &ParamBuilder, c: &TextConfig) -> Result<Self> {
        let d = c.hidden_size;
        let att = vb.pp("attention");
        let sa = att.pp("self");
        Ok(Self {
            attention: SelfAttention {
                q: linear(&sa.pp("query"), d, d)?,
                k: linear(&sa.pp("key"), d, d)?,
                v: linear(&sa.pp("value"), d, d)?,
                out: linear(&att.pp("output").pp("dense"), d, d)?,
                heads: c.num_heads,
            },
            attention_norm: LayerNorm::new(&att.pp("output").pp("LayerNorm"), d, c.layer_norm_eps)?,
            intermediate: linear(&vb.pp("intermediate").pp("dense"), d, c.intermediate_size)?,
            output: linear(&vb.pp("output").pp("dense"), c.intermediate_size, d)?,
            output_norm: LayerNorm::new(&vb.pp("output").pp("LayerNorm"), d, c.layer_norm_eps)?,
        })
    }

    fn forward(&self, x: &Tensor, bias: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let a = ctx.dropout(&self.attention.forward(x, bias, ctx)?)?;
        let h = self.attention_norm.forward(&(x + a)?)?;
        let f = self.intermediate.forward(&h)?.gelu_erf()?;
        let f = ctx.dropout(&self.output.forward(&f)?)?;
        self.output_norm.forward(&(h + f)?)
    }
}

pub(crate) struct TextNet {
    config: TextConfig,
    word: Tensor,
    position: Tensor,
    token_type: Tensor,
    embedding_norm: LayerNorm,
    layers: Vec<BertLayer>,
}

impl TextNet {
    pub(crate) fn new(vb: &ParamBuilder, c: &TextConfig, layers: usize) -> Result<Self> {
        let d = c.hidden_size;
        let eb = vb.pp("embeddings");
        let init = Init::Normal(0.02);
        let lb = vb.pp("encoder").pp("layer");
        Ok(Self {
            config: c.clone(),
            word: eb.pp("word_embeddings").get(&[c.vocab_size, d], "weight", init)?,
            position: eb.pp("position_embeddings").get(&[c.max_positions, d], "weight", init)?,
            token_type: eb.pp("token_type_embeddings").get(&[c.type_vocab_size, d], "weight", init)?,
            embedding_norm: LayerNorm::new(&eb.pp("LayerNorm"), d, c.layer_norm_eps)?,
            layers: (0..layers).map(|i| BertLayer::new(&lb.pp(i), c)).collect::<Result<_>>()?,
        })
    }

    pub(crate) fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    /// `ids`: `(batch, N)` u32, padded with any valid id.
    pub(crate) fn embed(&self, ids: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let (b, n) = ids.dims2()?;
        let d = self.config.hidden_size;
        let words = self.word.index_select(&ids.flatten_all()?, 0)?.reshape((b, n, d))?;
        let positions = self.position.narrow(0, 0, n)?.unsqueeze(0)?;
        let token_type = self.token_type.narrow(0, 0, 1)?.unsqueeze(0)?;
        let h = words.broadcast_add(&positions)?.broadcast_add(&token_type)?;
        ctx.dropout(&self.embedding_norm.forward(&h)?)
    }

    pub(crate) fn transformer(&self, embedded: &Tensor, lengths: &[usize], ctx: &ForwardCtx) -> Result<Vec<Tensor>> {
        let (_, n, _) = embedded.dims3()?;
        let bias = key_bias(lengths, n, embedded.dtype(), embedded.device())?;
        let mut states = vec![embedded.clone()];
        let mut h = embedded.clone();
        for layer in &self.layers {
            h = layer.forward(&h, &bias, ctx)?;
            states.push(h.clone());
        }
        Ok(states)
    }

    pub(crate) fn truncate(&mut self, keep: usize) {
        self.layers.truncate(keep);
    }
}
