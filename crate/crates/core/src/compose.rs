//! Bridges registry modules onto a tape: dispatching a source through the
//! right encoder forward and a prefix through a decoder. Shared by training
//! and evaluation.

use crate::corpus::{SourceData, BOS_ID};
use crate::error::{Error, Result};
use crate::nn::{text_decoder_forward, text_encoder_forward, Binding, ForwardMode};
use crate::registry::{LangModule, ModuleConfig};
use crate::speech::speech_encoder_forward;
use crate::tensor::{Scalar, Tape, Var};

/// Runs one example's source through an encoder module already bound to the
/// tape. Output lives in the shared `[T x d_model]` space.
pub fn encode_source<F: Scalar>(
    tape: &mut Tape<F>,
    module: &LangModule,
    binding: &Binding,
    source: &SourceData,
    mode: &mut ForwardMode,
) -> Result<Var> {
    match (&module.config, source) {
        (ModuleConfig::TextEncoder(cfg), SourceData::Text(ids)) => {
            text_encoder_forward(tape, binding, cfg, ids, mode)
        }
        (ModuleConfig::SpeechEncoder(cfg), SourceData::Speech(features)) => {
            let leaf = tape.constant(features.frames().cast());
            speech_encoder_forward(tape, binding, cfg, leaf, mode)
        }
        (ModuleConfig::TextEncoder(_), SourceData::Speech(_)) => {
            Err(Error::data("text encoder fed speech features"))
        }
        (ModuleConfig::SpeechEncoder(_), SourceData::Text(_)) => {
            Err(Error::data("speech encoder fed token ids"))
        }
        (ModuleConfig::TextDecoder(_), _) => Err(Error::config("cannot encode with a decoder")),
    }
}

/// Decoder logits for a BOS-prefixed target prefix over an encoded source.
pub fn decode_logits<F: Scalar>(
    tape: &mut Tape<F>,
    module: &LangModule,
    binding: &Binding,
    prefix: &[u32],
    encoder_out: Var,
    mode: &mut ForwardMode,
) -> Result<Var> {
    match &module.config {
        ModuleConfig::TextDecoder(cfg) => {
            text_decoder_forward(tape, binding, cfg, prefix, encoder_out, BOS_ID, mode)
        }
        _ => Err(Error::config("decoding requires a text decoder module")),
    }
}
