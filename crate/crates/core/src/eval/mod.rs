//! Inference and measurement: greedy decoding, BLEU/WER, the supervised and
//! zero-shot evaluation grid with cascade rows, the adapter-size sweep, and
//! representation-space analyses.

mod analysis;
mod metrics;
mod sweep;

pub use analysis::{
    extract_representations, project_2d, projection_csv, retrieval_top1, Projection2d, ReprStage,
    RepresentationSet, RetrievalReport,
};
pub use metrics::{bleu, edit_distance, wer};
pub use sweep::{adapter_sweep, sweep_csv, AdapterSweepConfig, SweepRow};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compose::{decode_logits, encode_source};
use crate::corpus::{
    BpeModel, CachedEncoder, CorpusManifest, Dataset, SourceData, Split, BOS_ID, EOS_ID,
};
use crate::error::{Error, Result};
use crate::nn::{bind_store, ForwardMode};
use crate::registry::{ModuleKey, Registry, TranslationPath};
use crate::tensor::Tape;

/// Argmax decoding from BOS until EOS or `max_len` emitted tokens. Returns
/// the emitted tokens without specials; deterministic (ties take the lowest
/// id).
pub fn greedy_decode(
    registry: &Registry,
    path: &TranslationPath,
    source: &SourceData,
    max_len: usize,
) -> Result<Vec<u32>> {
    if max_len < 1 {
        return Err(Error::config("greedy decode needs max_len >= 1"));
    }
    let src_module = registry.get(&path.src)?;
    let tgt_module = registry.get(&path.tgt)?;
    let mut tape: Tape<f32> = Tape::new();
    let src_binding = bind_store(&mut tape, &src_module.params, false);
    let tgt_binding = bind_store(&mut tape, &tgt_module.params, false);
    let mut mode = ForwardMode::Eval;
    let enc_out = encode_source(&mut tape, src_module, &src_binding, source, &mut mode)?;

    let mut prefix: Vec<u32> = vec![BOS_ID];
    let mut emitted: Vec<u32> = Vec::new();
    loop {
        let logits = decode_logits(&mut tape, tgt_module, &tgt_binding, &prefix, enc_out, &mut mode)?;
        let value = tape.value(logits);
        let last = value.row(value.shape()[0] - 1);
        let mut best = (f32::NEG_INFINITY, 0u32);
        for (id, &score) in last.iter().enumerate() {
            if score > best.0 {
                best = (score, id as u32);
            }
        }
        if best.1 == EOS_ID {
            break;
        }
        emitted.push(best.1);
        prefix.push(best.1);
        if emitted.len() >= max_len {
            break;
        }
    }
    Ok(emitted)
}

/// Decodes a whole example list, optionally across threads; results are
/// assembled in input order, so the output is identical for any thread
/// count.
pub fn decode_corpus(
    registry: &Registry,
    path: &TranslationPath,
    examples: &[(String, SourceData)],
    max_len: usize,
    threads: usize,
) -> Result<Vec<(String, Vec<u32>)>> {
    if threads <= 1 || examples.len() <= 1 {
        let mut out = Vec::with_capacity(examples.len());
        for (id, source) in examples {
            out.push((id.clone(), greedy_decode(registry, path, source, max_len)?));
        }
        return Ok(out);
    }
    let workers = threads.min(examples.len());
    let mut slots: Vec<Option<Result<Vec<u32>>>> = Vec::new();
    slots.resize_with(examples.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            handles.push(scope.spawn(move || {
                let mut results = Vec::new();
                for idx in (w..examples.len()).step_by(workers) {
                    results.push((idx, greedy_decode(registry, path, &examples[idx].1, max_len)));
                }
                results
            }));
        }
        for handle in handles {
            for (idx, result) in handle.join().expect("decode worker panicked") {
                slots[idx] = Some(result);
            }
        }
    });
    let mut out = Vec::with_capacity(examples.len());
    for ((id, _), slot) in examples.iter().zip(slots) {
        out.push((id.clone(), slot.expect("every slot filled")?));
    }
    Ok(out)
}

/// One cell of the evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub model: String,
    pub system: String,
    pub src_key: String,
    pub tgt_key: String,
    pub metric: String,
    /// None marks an absent cell (no route or no data), not a failure.
    pub value: Option<f64>,
    pub supervised: bool,
    pub n_sentences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: String,
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("report serialization failed: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::data(format!("malformed eval report: {e}")))
    }
}

#[derive(Clone, Debug)]
pub struct EvalGridOptions {
    pub split: Split,
    /// Cap on sentences per cell, applied in manifest order; None = all.
    pub max_sentences: Option<usize>,
    pub max_len: usize,
    pub threads: usize,
}

impl Default for EvalGridOptions {
    fn default() -> Self {
        EvalGridOptions { split: Split::Test, max_sentences: None, max_len: 64, threads: 1 }
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Evaluates every (speech encoder x text decoder) route of one model
/// registry: WER against transcripts for same-language routes, BLEU
/// otherwise, each cell marked supervised from the training log, plus
/// cascade rows (transcribe, then translate with the text modules).
pub fn eval_grid(
    registry: &Registry,
    model_name: &str,
    manifest: &CorpusManifest,
    base_dir: &Path,
    bpe: &BpeModel,
    opts: &EvalGridOptions,
) -> Result<EvalReport> {
    let mut cells = Vec::new();
    let mut encoder = CachedEncoder::new(bpe);
    let speech_encoders: Vec<ModuleKey> = registry
        .encoder_keys()
        .into_iter()
        .filter(|k| k.modality == crate::registry::Modality::Speech)
        .collect();
    let decoders = registry.decoder_keys();

    for speech_key in &speech_encoders {
        // direct rows: speech encoder -> every text decoder
        for decoder_key in &decoders {
            let records =
                manifest.speech_records(&speech_key.language, &decoder_key.language, opts.split);
            let cell = evaluate_route(
                registry,
                model_name,
                "direct",
                speech_key,
                decoder_key,
                &records,
                &mut encoder,
                base_dir,
                opts,
            )?;
            cells.push(cell);
        }

        // cascade rows: transcribe with the same-language decoder, then pipe
        // the transcript through the text MT route
        let asr_decoder = ModuleKey::text_decoder(&speech_key.language);
        let text_encoder = ModuleKey::text_encoder(&speech_key.language);
        if registry.contains(&asr_decoder) && registry.contains(&text_encoder) {
            for decoder_key in &decoders {
                if decoder_key.language == speech_key.language {
                    continue;
                }
                let cell = evaluate_cascade(
                    registry,
                    model_name,
                    speech_key,
                    &asr_decoder,
                    &text_encoder,
                    decoder_key,
                    manifest,
                    bpe,
                    base_dir,
                    opts,
                )?;
                cells.push(cell);
            }
        }
    }
    Ok(EvalReport { model: model_name.to_string(), split: opts.split.as_str().to_string(), cells })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_route(
    registry: &Registry,
    model_name: &str,
    system: &str,
    src_key: &ModuleKey,
    tgt_key: &ModuleKey,
    records: &[&crate::corpus::ManifestRecord],
    encoder: &mut CachedEncoder,
    base_dir: &Path,
    opts: &EvalGridOptions,
) -> Result<EvalCell> {
    let metric = if src_key.language == tgt_key.language { "WER" } else { "BLEU" };
    let supervised = registry.is_supervised_pair(src_key, tgt_key);
    let absent = EvalCell {
        model: model_name.to_string(),
        system: system.to_string(),
        src_key: src_key.label(),
        tgt_key: tgt_key.label(),
        metric: metric.to_string(),
        value: None,
        supervised,
        n_sentences: 0,
    };
    if records.is_empty() {
        return Ok(absent);
    }
    let Ok(path) = registry.route(src_key, tgt_key) else {
        return Ok(absent);
    };
    let take = opts.max_sentences.unwrap_or(records.len()).min(records.len());
    let records = &records[..take];
    let dataset = Dataset::from_records(records, encoder, base_dir)?;
    let examples: Vec<(String, SourceData)> = dataset
        .examples
        .iter()
        .map(|e| (e.id.clone(), e.source.clone()))
        .collect();
    let decoded = decode_corpus(registry, &path, &examples, opts.max_len, opts.threads)?;
    let hypotheses: Vec<String> =
        decoded.iter().map(|(_, ids)| encoder.model().decode(ids)).collect();
    let references: Vec<String> = dataset.examples.iter().map(|e| e.target_text.clone()).collect();
    let value = match metric {
        "WER" => wer(&hypotheses, &references)?,
        _ => bleu(&hypotheses, &references)?,
    };
    Ok(EvalCell { value: Some(round6(value)), n_sentences: references.len(), ..absent })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cascade(
    registry: &Registry,
    model_name: &str,
    speech_key: &ModuleKey,
    asr_decoder: &ModuleKey,
    text_encoder: &ModuleKey,
    tgt_key: &ModuleKey,
    manifest: &CorpusManifest,
    bpe: &BpeModel,
    base_dir: &Path,
    opts: &EvalGridOptions,
) -> Result<EvalCell> {
    let mut encoder = CachedEncoder::new(bpe);
    let supervised = registry.is_supervised_pair(text_encoder, tgt_key);
    let absent = EvalCell {
        model: model_name.to_string(),
        system: "cascade".to_string(),
        src_key: speech_key.label(),
        tgt_key: tgt_key.label(),
        metric: "BLEU".to_string(),
        value: None,
        supervised,
        n_sentences: 0,
    };
    let records = manifest.speech_records(&speech_key.language, &tgt_key.language, opts.split);
    if records.is_empty() {
        return Ok(absent);
    }
    let (Ok(asr_path), Ok(mt_path)) =
        (registry.route(speech_key, asr_decoder), registry.route(text_encoder, tgt_key))
    else {
        return Ok(absent);
    };
    let take = opts.max_sentences.unwrap_or(records.len()).min(records.len());
    let records = &records[..take];
    let dataset = Dataset::from_records(records, &mut encoder, base_dir)?;
    let speech_examples: Vec<(String, SourceData)> = dataset
        .examples
        .iter()
        .map(|e| (e.id.clone(), e.source.clone()))
        .collect();
    let transcripts = decode_corpus(registry, &asr_path, &speech_examples, opts.max_len, opts.threads)?;
    let mt_examples: Vec<(String, SourceData)> = transcripts
        .iter()
        .map(|(id, ids)| {
            let text = bpe.decode(ids);
            (id.clone(), SourceData::Text(bpe.encode(&text)))
        })
        .collect();
    // empty transcripts cannot enter the text encoder; score them as empty
    let decodable: Vec<(String, SourceData)> = mt_examples
        .iter()
        .filter(|(_, s)| matches!(s, SourceData::Text(ids) if !ids.is_empty()))
        .cloned()
        .collect();
    let decoded = decode_corpus(registry, &mt_path, &decodable, opts.max_len, opts.threads)?;
    let mut by_id: std::collections::HashMap<&str, &Vec<u32>> =
        std::collections::HashMap::new();
    for (id, ids) in &decoded {
        by_id.insert(id.as_str(), ids);
    }
    let hypotheses: Vec<String> = mt_examples
        .iter()
        .map(|(id, _)| by_id.get(id.as_str()).map(|ids| bpe.decode(ids)).unwrap_or_default())
        .collect();
    let references: Vec<String> = dataset.examples.iter().map(|e| e.target_text.clone()).collect();
    let value = bleu(&hypotheses, &references)?;
    Ok(EvalCell { value: Some(round6(value)), n_sentences: references.len(), ..absent })
}
