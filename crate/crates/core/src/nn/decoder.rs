use super::{
    embed_tokens, feed_forward, layer_norm_named, multi_head_attention, AttentionVars, Binding,
    ForwardMode, TextDecoderConfig,
};
use crate::error::{Error, Result};
use crate::tensor::{RowMask, Scalar, Tape, Var};

/// Causal self-attention + cross-attention + feed-forward stack over a target
/// prefix, ending in the final layer norm and the vocabulary projection.
/// Returns logits `[T x V]`.
pub fn text_decoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    cfg: &TextDecoderConfig,
    prefix: &[u32],
    encoder_out: Var,
    bos_id: u32,
    mode: &mut ForwardMode,
) -> Result<Var> {
    if prefix.is_empty() {
        return Err(Error::data("decoder prefix is empty"));
    }
    if prefix[0] != bos_id {
        return Err(Error::data(format!(
            "decoder prefix must begin with BOS (id {bos_id}), got {}",
            prefix[0]
        )));
    }
    let t_cfg = &cfg.transformer;
    let mut x = embed_tokens(tape, binding, t_cfg.d_model, prefix)?;
    x = mode.apply_dropout(tape, x, t_cfg.dropout)?;
    let causal = RowMask::causal(prefix.len());

    for i in 0..t_cfg.n_layers {
        let self_attn = AttentionVars::from_binding(binding, &format!("layers.{i}.self_attn"))?;
        let a = multi_head_attention(tape, &self_attn, t_cfg.n_heads, x, x, x, Some(&causal), None)?;
        let a = mode.apply_dropout(tape, a, t_cfg.dropout)?;
        let sum = tape.add(x, a)?;
        x = layer_norm_named(tape, binding, &format!("layers.{i}.ln1"), sum)?;

        let cross_attn = AttentionVars::from_binding(binding, &format!("layers.{i}.cross_attn"))?;
        let c = multi_head_attention(
            tape,
            &cross_attn,
            t_cfg.n_heads,
            x,
            encoder_out,
            encoder_out,
            None,
            None,
        )?;
        let c = mode.apply_dropout(tape, c, t_cfg.dropout)?;
        let sum = tape.add(x, c)?;
        x = layer_norm_named(tape, binding, &format!("layers.{i}.ln2"), sum)?;

        let f = feed_forward(tape, binding, &format!("layers.{i}.ff"), x)?;
        let f = mode.apply_dropout(tape, f, t_cfg.dropout)?;
        let sum = tape.add(x, f)?;
        x = layer_norm_named(tape, binding, &format!("layers.{i}.ln3"), sum)?;
    }
    x = layer_norm_named(tape, binding, "final_ln", x)?;
    let w = binding.var("out_proj.w")?;
    let b = binding.var("out_proj.b")?;
    let logits = tape.matmul(x, w)?;
    tape.add_row(logits, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{
        bind_store, text_decoder_param_specs, text_encoder_param_specs, ParamStore,
        TextEncoderConfig, TransformerConfig,
    };
    use crate::tensor::Tensor;

    const BOS: u32 = 1;

    fn toy_dec(vocab: usize) -> TextDecoderConfig {
        TextDecoderConfig { transformer: TransformerConfig::toy(), vocab_size: vocab }
    }

    fn run_logits(prefix: &[u32], enc_data: Tensor<f64>, seed: u64) -> Vec<f64> {
        let cfg = toy_dec(24);
        let store = ParamStore::init(&text_decoder_param_specs(&cfg), seed);
        let mut tape: Tape<f64> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        let enc = tape.constant(enc_data);
        let out = text_decoder_forward(&mut tape, &binding, &cfg, prefix, enc, BOS, &mut ForwardMode::Eval)
            .unwrap();
        tape.value(out).data().to_vec()
    }

    fn enc_fixture(t: usize) -> Tensor<f64> {
        Tensor::new(vec![t, 64], (0..t * 64).map(|i| (i as f64 * 0.11).sin() * 0.5).collect()).unwrap()
    }

    #[test]
    fn logits_shape_is_t_by_vocab() {
        let out = run_logits(&[BOS, 5, 9], enc_fixture(4), 3);
        assert_eq!(out.len(), 3 * 24);
    }

    #[test]
    fn prefix_must_start_with_bos() {
        let cfg = toy_dec(24);
        let store = ParamStore::init(&text_decoder_param_specs(&cfg), 3);
        let mut tape: Tape<f64> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        let enc = tape.constant(enc_fixture(4));
        let err = text_decoder_forward(&mut tape, &binding, &cfg, &[5, 9], enc, BOS, &mut ForwardMode::Eval)
            .unwrap_err();
        assert!(err.to_string().contains("BOS"));
    }

    #[test]
    fn out_of_vocab_prefix_is_config_error() {
        let cfg = toy_dec(24);
        let store = ParamStore::init(&text_decoder_param_specs(&cfg), 3);
        let mut tape: Tape<f64> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        let enc = tape.constant(enc_fixture(4));
        let err = text_decoder_forward(&mut tape, &binding, &cfg, &[BOS, 999], enc, BOS, &mut ForwardMode::Eval)
            .unwrap_err();
        assert!(matches!(err, crate::error::Error::Config(_)));
    }

    #[test]
    fn cross_attention_is_live() {
        // perturbing one encoder vector must change some logit
        let base = enc_fixture(4);
        let mut bumped = base.clone();
        bumped.data_mut()[2 * 64 + 7] += 1.0;
        let a = run_logits(&[BOS, 5, 9], base, 3);
        let b = run_logits(&[BOS, 5, 9], bumped, 3);
        let max_delta = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta > 0.0, "encoder output does not reach the logits");
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        // logits at position t are invariant to target tokens at positions > t
        let enc = enc_fixture(4);
        let a = run_logits(&[BOS, 5, 9, 2], enc.clone(), 3);
        let b = run_logits(&[BOS, 5, 14, 21], enc, 3);
        let v = 24;
        for pos in 0..2 {
            for c in 0..v {
                assert_eq!(
                    a[pos * v + c].to_bits(),
                    b[pos * v + c].to_bits(),
                    "position {pos} saw a future token"
                );
            }
        }
        assert!(a[2 * v..3 * v].iter().zip(&b[2 * v..3 * v]).any(|(x, y)| x != y));
    }

    #[test]
    fn two_encoders_feed_the_same_decoder() {
        // encoders with different parameters produce outputs the same decoder
        // consumes without shape adaptation
        let enc_cfg = TextEncoderConfig { transformer: TransformerConfig::toy(), vocab_size: 17 };
        let store_a = ParamStore::init(&text_encoder_param_specs(&enc_cfg), 100);
        let store_b = ParamStore::init(&text_encoder_param_specs(&enc_cfg), 200);
        let dec_cfg = toy_dec(24);
        let dec_store = ParamStore::init(&text_decoder_param_specs(&dec_cfg), 300);

        for enc_store in [&store_a, &store_b] {
            let mut tape: Tape<f32> = Tape::new();
            let enc_binding = bind_store(&mut tape, enc_store, false);
            let enc_out = crate::nn::text_encoder_forward(
                &mut tape,
                &enc_binding,
                &enc_cfg,
                &[3, 4, 5],
                &mut ForwardMode::Eval,
            )
            .unwrap();
            let dec_binding = bind_store(&mut tape, &dec_store, false);
            let logits = text_decoder_forward(
                &mut tape,
                &dec_binding,
                &dec_cfg,
                &[BOS, 2],
                enc_out,
                BOS,
                &mut ForwardMode::Eval,
            )
            .unwrap();
            assert_eq!(tape.value(logits).shape(), &[2, 24]);
        }
    }
}
