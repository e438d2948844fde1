//! BERT-style transformer encoder. Parameter names follow the usual
//! `embeddings.*` / `encoder.layer.N.*` layout so BERT checkpoints in
//! safetensors form load directly.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::input::Batch;
use super::params::ParamStore;
use super::EncoderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Final hidden state of the `[CLS]` position.
    #[default]
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone_identifier: String,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_dim: usize,
    pub max_sequence_length: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub hidden_dropout: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub lowercase: bool,
}

fn default_eps() -> f64 {
    1e-12
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.hidden_dim == 0
            || self.num_heads == 0
            || !self.hidden_dim.is_multiple_of(self.num_heads)
        {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.max_sequence_length < 4 {
            return fail("max_sequence_length must be at least 4".into());
        }
        if !(0.0..1.0).contains(&self.hidden_dropout) {
            return fail(format!(
                "hidden_dropout {} outside [0, 1)",
                self.hidden_dropout
            ));
        }
        if self.vocab_size < 5 || self.num_layers == 0 || self.intermediate_dim == 0 {
            return fail("vocab_size, num_layers and intermediate_dim must be positive".into());
        }
        Ok(())
    }
}

/// Forward-pass context: `Some(rng)` enables dropout (training), `None` is
/// deterministic evaluation.
pub struct ForwardCtx<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, xs: &Tensor, p: f64) -> Result<Tensor, EncoderError> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(xs.clone());
        };
        if p <= 0.0 {
            return Ok(xs.clone());
        }
        let keep = 1.0 - p;
        let scale = (1.0 / keep) as f32;
        let mask: Vec<f32> = (0..xs.elem_count())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, xs.shape(), xs.device())?.to_dtype(xs.dtype())?;
        Ok(xs.mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn new(
        p: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncoderError> {
        Ok(Self {
            weight: p.normal(&format!("{name}.weight"), &[output, input], 0.02, rng)?,
            bias: p.constant(&format!("{name}.bias"), &[output], 0.0)?,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor, EncoderError> {
        Ok(xs
            .broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    fn new(p: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self, EncoderError> {
        Ok(Self {
            weight: p.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            bias: p.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor, EncoderError> {
        let dim = xs.dim(D::Minus1)? as f64;
        let mean = (xs.sum_keepdim(D::Minus1)? / dim)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attention_out: Linear,
    attention_norm: LayerNorm,
    intermediate: Linear,
    output: Linear,
    output_norm: LayerNorm,
}

impl Layer {
    fn new(
        p: &mut ParamStore,
        i: usize,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncoderError> {
        let d = cfg.hidden_dim;
        let prefix = format!("encoder.layer.{i}");
        Ok(Self {
            query: Linear::new(p, &format!("{prefix}.attention.self.query"), d, d, rng)?,
            key: Linear::new(p, &format!("{prefix}.attention.self.key"), d, d, rng)?,
            value: Linear::new(p, &format!("{prefix}.attention.self.value"), d, d, rng)?,
            attention_out: Linear::new(p, &format!("{prefix}.attention.output.dense"), d, d, rng)?,
            attention_norm: LayerNorm::new(
                p,
                &format!("{prefix}.attention.output.LayerNorm"),
                d,
                cfg.layer_norm_eps,
            )?,
            intermediate: Linear::new(
                p,
                &format!("{prefix}.intermediate.dense"),
                d,
                cfg.intermediate_dim,
                rng,
            )?,
            output: Linear::new(
                p,
                &format!("{prefix}.output.dense"),
                cfg.intermediate_dim,
                d,
                rng,
            )?,
            output_norm: LayerNorm::new(
                p,
                &format!("{prefix}.output.LayerNorm"),
                d,
                cfg.layer_norm_eps,
            )?,
        })
    }

    fn forward(
        &self,
        xs: &Tensor,
        mask_bias: &Tensor,
        cfg: &EncoderConfig,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor, EncoderError> {
        let (batch, len, d) = xs.dims3()?;
        let heads = cfg.num_heads;
        let head_dim = d / heads;
        let split = |t: Tensor| -> Result<Tensor, EncoderError> {
            Ok(t.reshape((batch, len, heads, head_dim))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.query.forward(xs)?)?;
        let k = split(self.key.forward(xs)?)?;
        let v = split(self.value.forward(xs)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (head_dim as f64).sqrt())?;
        let scores = scores.broadcast_add(mask_bias)?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let context = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((batch, len, d))?;
        let attended = ctx.dropout(&self.attention_out.forward(&context)?, cfg.hidden_dropout)?;
        let xs = self.attention_norm.forward(&(attended + xs)?)?;
        let hidden = self.intermediate.forward(&xs)?.gelu_erf()?;
        let out = ctx.dropout(&self.output.forward(&hidden)?, cfg.hidden_dropout)?;
        self.output_norm.forward(&(out + xs)?)
    }
}

/// The transformer backbone; produces pooled `[batch, hidden_dim]` states.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: EncoderConfig,
    word_embeddings: Tensor,
    position_embeddings: Tensor,
    token_type_embeddings: Tensor,
    embedding_norm: LayerNorm,
    layers: Vec<Layer>,
}

impl Backbone {
    pub fn new(
        config: &EncoderConfig,
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.hidden_dim;
        let word_embeddings = params.normal(
            "embeddings.word_embeddings.weight",
            &[config.vocab_size, d],
            0.02,
            rng,
        )?;
        let position_embeddings = params.normal(
            "embeddings.position_embeddings.weight",
            &[config.max_sequence_length, d],
            0.02,
            rng,
        )?;
        let token_type_embeddings = params.normal(
            "embeddings.token_type_embeddings.weight",
            &[2, d],
            0.02,
            rng,
        )?;
        let embedding_norm =
            LayerNorm::new(params, "embeddings.LayerNorm", d, config.layer_norm_eps)?;
        let layers = (0..config.num_layers)
            .map(|i| Layer::new(params, i, config, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config: config.clone(),
            word_embeddings,
            position_embeddings,
            token_type_embeddings,
            embedding_norm,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Replaces runtime options (dropout, length cap). Parameter shapes are
    /// fixed at construction; the length cap may only shrink.
    pub(crate) fn set_config(&mut self, config: EncoderConfig) {
        debug_assert!(config.max_sequence_length <= self.position_embeddings.dim(0).unwrap_or(0));
        self.config = config;
    }

    /// Final hidden states `[batch, len, hidden_dim]`.
    pub fn hidden_states(
        &self,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor, EncoderError> {
        let (b, len) = batch.token_ids.dims2()?;
        if len > self.config.max_sequence_length {
            return Err(EncoderError::TooLong {
                len,
                max: self.config.max_sequence_length,
            });
        }
        let d = self.config.hidden_dim;
        let words = self
            .word_embeddings
            .index_select(&batch.token_ids.flatten_all()?, 0)?
            .reshape((b, len, d))?;
        let types = self
            .token_type_embeddings
            .index_select(&batch.type_ids.flatten_all()?, 0)?
            .reshape((b, len, d))?;
        let positions = self.position_embeddings.narrow(0, 0, len)?;
        let xs = words.add(&types)?.broadcast_add(&positions)?;
        let mut xs = ctx.dropout(
            &self.embedding_norm.forward(&xs)?,
            self.config.hidden_dropout,
        )?;

        // 0 for real tokens, a large negative number for padding keys
        let mask_bias = ((batch.mask.ones_like()? - &batch.mask)? * -1e9)?
            .to_dtype(xs.dtype())?
            .reshape((b, 1, 1, len))?;
        for layer in &self.layers {
            xs = layer.forward(&xs, &mask_bias, &self.config, ctx)?;
        }
        Ok(xs)
    }

    pub fn pooled(&self, batch: &Batch, ctx: &mut ForwardCtx) -> Result<Tensor, EncoderError> {
        let hidden = self.hidden_states(batch, ctx)?;
        match self.config.pooling {
            Pooling::Cls => Ok(hidden.narrow(1, 0, 1)?.squeeze(1)?),
        }
    }
}

/// Dtype-agnostic copy of a `[batch, n]` tensor into nested `f64` vectors.
pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>, EncoderError> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}
