//! Transformer building blocks: parameter stores, attention, encoder and
//! decoder stacks, positional encodings.

mod attention;
mod decoder;
mod encoder;
mod params;
mod positional;

pub use attention::{multi_head_attention, AttentionBias, AttentionBiasKind, AttentionVars};
pub use decoder::text_decoder_forward;
pub use encoder::{encoder_stack, text_encoder_forward};
pub use params::{bind_store, bind_tensors, Binding, InitKind, ParamSpec, ParamStore};
pub use positional::sinusoidal_positions;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Stack geometry shared by every encoder and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f32,
    /// One extra layer norm over the stack output. Always true here.
    pub final_layer_norm: bool,
}

impl TransformerConfig {
    pub fn toy() -> Self {
        TransformerConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            dropout: 0.1,
            final_layer_norm: true,
        }
    }

    pub fn paper_scale() -> Self {
        TransformerConfig {
            d_model: 512,
            n_heads: 8,
            n_layers: 6,
            d_ff: 2048,
            dropout: 0.1,
            final_layer_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::config("transformer dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.final_layer_norm {
            return Err(Error::config(
                "final_layer_norm must stay enabled; the stacks end in a layer norm",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub transformer: TransformerConfig,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextDecoderConfig {
    pub transformer: TransformerConfig,
    pub vocab_size: usize,
}

/// Whether a forward pass applies dropout; training mode carries the RNG that
/// makes masks replayable.
pub enum ForwardMode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng },
}

impl ForwardMode<'_> {
    pub(crate) fn apply_dropout<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        x: Var,
        rate: f32,
    ) -> Result<Var> {
        match self {
            ForwardMode::Eval => Ok(x),
            ForwardMode::Train { rng } => {
                if rate <= 0.0 {
                    return Ok(x);
                }
                use rand::Rng;
                let keep = 1.0 - rate as f64;
                let inv_keep = F::from_f64c(1.0 / keep);
                let mask: Vec<F> = (0..tape.value(x).numel())
                    .map(|_| if rng.gen::<f64>() < keep { inv_keep } else { F::zero() })
                    .collect();
                tape.dropout(x, mask)
            }
        }
    }
}

/// Applies a named layer norm from the binding.
pub(crate) fn layer_norm_named<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = binding.var(&format!("{prefix}.gain"))?;
    let bias = binding.var(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, gain, bias, F::from_f64c(LAYER_NORM_EPS))
}

/// `relu(x w1 + b1) w2 + b2`
pub(crate) fn feed_forward<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w1 = binding.var(&format!("{prefix}.w1"))?;
    let b1 = binding.var(&format!("{prefix}.b1"))?;
    let w2 = binding.var(&format!("{prefix}.w2"))?;
    let b2 = binding.var(&format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, w2)?;
    tape.add_row(out, b2)
}

/// Embeds token ids, scales by sqrt(d_model) and adds sinusoidal positions.
pub(crate) fn embed_tokens<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    d_model: usize,
    ids: &[u32],
) -> Result<Var> {
    let table = binding.var("embed.weight")?;
    let emb = tape.embedding(table, ids)?;
    let scaled = tape.scale(emb, F::from_f64c((d_model as f64).sqrt()))?;
    let pe = tape.constant(sinusoidal_positions(ids.len(), d_model));
    tape.add(scaled, pe)
}

/// Parameter shapes of one attention block under `prefix`.
pub(crate) fn attention_param_specs(prefix: &str, d_model: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for mat in ["wq", "wk", "wv", "wo"] {
        specs.push(ParamSpec::glorot(format!("{prefix}.{mat}"), vec![d_model, d_model]));
    }
    for vecp in ["bq", "bk", "bv", "bo"] {
        specs.push(ParamSpec::zeros(format!("{prefix}.{vecp}"), vec![d_model]));
    }
    specs
}

pub(crate) fn layer_norm_param_specs(prefix: &str, d_model: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::ones(format!("{prefix}.gain"), vec![d_model]),
        ParamSpec::zeros(format!("{prefix}.bias"), vec![d_model]),
    ]
}

pub(crate) fn feed_forward_param_specs(prefix: &str, d_model: usize, d_ff: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::glorot(format!("{prefix}.w1"), vec![d_model, d_ff]),
        ParamSpec::zeros(format!("{prefix}.b1"), vec![d_ff]),
        ParamSpec::glorot(format!("{prefix}.w2"), vec![d_ff, d_model]),
        ParamSpec::zeros(format!("{prefix}.b2"), vec![d_model]),
    ]
}

/// Shapes of the encoder-side stack (self-attention + feed-forward layers
/// plus the final norm), shared by text and speech encoders.
pub(crate) fn encoder_stack_param_specs(t: &TransformerConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for i in 0..t.n_layers {
        specs.extend(attention_param_specs(&format!("layers.{i}.self_attn"), t.d_model));
        specs.extend(layer_norm_param_specs(&format!("layers.{i}.ln1"), t.d_model));
        specs.extend(feed_forward_param_specs(&format!("layers.{i}.ff"), t.d_model, t.d_ff));
        specs.extend(layer_norm_param_specs(&format!("layers.{i}.ln2"), t.d_model));
    }
    specs.extend(layer_norm_param_specs("final_ln", t.d_model));
    specs
}

pub fn text_encoder_param_specs(cfg: &TextEncoderConfig) -> Vec<ParamSpec> {
    let mut specs = vec![ParamSpec::glorot(
        "embed.weight".to_string(),
        vec![cfg.vocab_size, cfg.transformer.d_model],
    )];
    specs.extend(encoder_stack_param_specs(&cfg.transformer));
    specs
}

pub fn text_decoder_param_specs(cfg: &TextDecoderConfig) -> Vec<ParamSpec> {
    let t = &cfg.transformer;
    let mut specs = vec![ParamSpec::glorot(
        "embed.weight".to_string(),
        vec![cfg.vocab_size, t.d_model],
    )];
    for i in 0..t.n_layers {
        specs.extend(attention_param_specs(&format!("layers.{i}.self_attn"), t.d_model));
        specs.extend(layer_norm_param_specs(&format!("layers.{i}.ln1"), t.d_model));
        specs.extend(attention_param_specs(&format!("layers.{i}.cross_attn"), t.d_model));
        specs.extend(layer_norm_param_specs(&format!("layers.{i}.ln2"), t.d_model));
        specs.extend(feed_forward_param_specs(&format!("layers.{i}.ff"), t.d_model, t.d_ff));
        specs.extend(layer_norm_param_specs(&format!("layers.{i}.ln3"), t.d_model));
    }
    specs.extend(layer_norm_param_specs("final_ln", t.d_model));
    specs.push(ParamSpec::glorot("out_proj.w".to_string(), vec![t.d_model, cfg.vocab_size]));
    specs.push(ParamSpec::zeros("out_proj.b".to_string(), vec![cfg.vocab_size]));
    specs
}

/// Exact number of scalar parameters in a store.
pub fn count_params(store: &ParamStore) -> u64 {
    store.iter().map(|(_, t)| t.numel() as u64).sum()
}

/// Exact number of scalar parameters a spec list would allocate.
pub fn count_spec_params(specs: &[ParamSpec]) -> u64 {
    specs.iter().map(|s| s.shape.iter().product::<usize>() as u64).sum()
}
