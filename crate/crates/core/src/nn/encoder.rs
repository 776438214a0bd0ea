use super::{
    embed_tokens, feed_forward, layer_norm_named, multi_head_attention, AttentionVars, Binding,
    ForwardMode, TextEncoderConfig, TransformerConfig,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Runs `n_layers` of post-norm (self-attention + feed-forward) sublayers on
/// an already-projected `[T x d_model]` input, then the final layer norm.
/// `bias`, when present, is added to every self-attention score matrix.
pub fn encoder_stack<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    cfg: &TransformerConfig,
    mut x: Var,
    bias: Option<Var>,
    mode: &mut ForwardMode,
) -> Result<Var> {
    for i in 0..cfg.n_layers {
        let attn = AttentionVars::from_binding(binding, &format!("layers.{i}.self_attn"))?;
        let a = multi_head_attention(tape, &attn, cfg.n_heads, x, x, x, None, bias)?;
        let a = mode.apply_dropout(tape, a, cfg.dropout)?;
        let sum = tape.add(x, a)?;
        x = layer_norm_named(tape, binding, &format!("layers.{i}.ln1"), sum)?;

        let f = feed_forward(tape, binding, &format!("layers.{i}.ff"), x)?;
        let f = mode.apply_dropout(tape, f, cfg.dropout)?;
        let sum = tape.add(x, f)?;
        x = layer_norm_named(tape, binding, &format!("layers.{i}.ln2"), sum)?;
    }
    layer_norm_named(tape, binding, "final_ln", x)
}

/// Token-id input to the shared representation space: embedding, positions,
/// encoder stack. Output is `[T x d_model]`.
pub fn text_encoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    cfg: &TextEncoderConfig,
    ids: &[u32],
    mode: &mut ForwardMode,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::data("cannot encode an empty token sequence"));
    }
    let x = embed_tokens(tape, binding, cfg.transformer.d_model, ids)?;
    let x = mode.apply_dropout(tape, x, cfg.transformer.dropout)?;
    encoder_stack(tape, binding, &cfg.transformer, x, None, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind_store, text_encoder_param_specs, ParamStore};

    fn toy_cfg(vocab: usize) -> TextEncoderConfig {
        TextEncoderConfig { transformer: TransformerConfig::toy(), vocab_size: vocab }
    }

    #[test]
    fn output_shape_is_t_by_d_model() {
        let cfg = toy_cfg(30);
        let store = ParamStore::init(&text_encoder_param_specs(&cfg), 1);
        let mut tape: Tape<f32> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        let out =
            text_encoder_forward(&mut tape, &binding, &cfg, &[4, 9, 2, 17, 5], &mut ForwardMode::Eval)
                .unwrap();
        assert_eq!(tape.value(out).shape(), &[5, 64]);
    }

    #[test]
    fn final_norm_zero_bias_gives_zero_mean_rows() {
        let cfg = toy_cfg(30);
        let store = ParamStore::init(&text_encoder_param_specs(&cfg), 1);
        let mut tape: Tape<f64> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        let out =
            text_encoder_forward(&mut tape, &binding, &cfg, &[1, 2, 3], &mut ForwardMode::Eval).unwrap();
        let v = tape.value(out);
        for r in 0..3 {
            let mean: f64 = v.row(r).iter().sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6, "row {r} mean {mean}");
        }
    }

    #[test]
    fn empty_sequence_is_an_input_error() {
        let cfg = toy_cfg(30);
        let store = ParamStore::init(&text_encoder_param_specs(&cfg), 1);
        let mut tape: Tape<f32> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        assert!(text_encoder_forward(&mut tape, &binding, &cfg, &[], &mut ForwardMode::Eval).is_err());
    }

    #[test]
    fn same_input_twice_is_bit_identical() {
        let cfg = toy_cfg(30);
        let store = ParamStore::init(&text_encoder_param_specs(&cfg), 1);
        let run = || {
            let mut tape: Tape<f32> = Tape::new();
            let binding = bind_store(&mut tape, &store, false);
            let out = text_encoder_forward(&mut tape, &binding, &cfg, &[7, 7, 8], &mut ForwardMode::Eval)
                .unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
