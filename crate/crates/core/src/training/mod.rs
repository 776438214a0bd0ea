//! Training procedures: joint multilingual MT over round-robin directions,
//! ASR pretraining of the speech encoder, and frozen-decoder coupling of the
//! speech modality into the shared space.

mod adam;
mod feed;

pub use adam::{LrSchedule, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use feed::{plan_epoch, DirectionFeed};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_param_specs, AdapterConfig};
use crate::compose::encode_source;
use crate::corpus::{Batch, BatchSource, Dataset, SourceData};
use crate::error::{Error, Result};
use crate::nn::{bind_store, Binding, ForwardMode, ParamStore};
use crate::registry::{ModuleConfig, ModuleKey, Registry, TrainingEvent};
use crate::seeding;
use crate::tensor::{Tape, Var};

/// One translation direction bound to its dataset.
#[derive(Clone, Debug)]
pub struct Direction {
    pub src: ModuleKey,
    pub tgt: ModuleKey,
    pub dataset: Dataset,
}

impl Direction {
    pub fn name(&self) -> String {
        format!("{}->{}", self.src.label(), self.tgt.label())
    }
}

/// Knobs shared by all three procedures. The seed is passed separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u64,
    #[serde(default = "default_batch_sentences")]
    pub batch_sentences: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup_steps")]
    pub warmup_steps: u64,
    #[serde(default)]
    pub label_smoothing: f32,
    #[serde(default = "default_true")]
    pub divergence_checks: bool,
}

fn default_batch_sentences() -> usize {
    16
}

fn default_peak_lr() -> f64 {
    3e-3
}

fn default_warmup_steps() -> u64 {
    400
}

fn default_true() -> bool {
    true
}

impl TrainingConfig {
    pub fn new(steps: u64) -> Self {
        TrainingConfig {
            steps,
            batch_sentences: default_batch_sentences(),
            peak_lr: default_peak_lr(),
            warmup_steps: default_warmup_steps(),
            label_smoothing: 0.0,
            divergence_checks: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("training needs at least one step"));
        }
        if self.batch_sentences == 0 {
            return Err(Error::config("batch_sentences must be >= 1"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { peak_lr: self.peak_lr, warmup_steps: self.warmup_steps }
    }
}

/// One optimizer step's record, serialized to the append-only JSON-lines
/// loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub direction: String,
    pub loss: f64,
    pub lr: f64,
    pub tokens: u64,
}

impl LossRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(96);
        write!(
            s,
            "{{\"step\":{},\"direction\":\"{}\",\"loss\":{:.6},\"lr\":{:.8},\"tokens\":{}}}",
            self.step, self.direction, self.loss, self.lr, self.tokens
        )
        .expect("writing to a String cannot fail");
        s
    }
}

/// Loss trajectory plus a non-convergence diagnostic (any 200-step window of
/// one direction whose moving average failed to decrease).
#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
    pub non_convergence: Option<String>,
}

impl TrainOutcome {
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_json_line());
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn final_loss(&self, window: usize) -> f64 {
        let n = self.records.len();
        if n == 0 {
            return f64::NAN;
        }
        let take = window.min(n).max(1);
        self.records[n - take..].iter().map(|r| r.loss).sum::<f64>() / take as f64
    }
}

const CONVERGENCE_WINDOW: usize = 200;

fn detect_non_convergence(records: &[LossRecord]) -> Option<String> {
    let mut per_direction: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        per_direction.entry(&r.direction).or_default().push(r.loss);
    }
    for (direction, losses) in per_direction {
        let w = CONVERGENCE_WINDOW;
        if losses.len() < w {
            continue;
        }
        let mut start = 0;
        while start + w <= losses.len() {
            let first: f64 = losses[start..start + w / 2].iter().sum::<f64>() / (w / 2) as f64;
            let second: f64 = losses[start + w / 2..start + w].iter().sum::<f64>() / (w / 2) as f64;
            // only meaningful regressions above the converged regime count
            if second > first + 1e-3 && first > 0.05 {
                return Some(format!(
                    "direction {direction}: loss moving average rose from {first:.4} to {second:.4} in window starting at its step {start}"
                ));
            }
            start += w / 2;
        }
    }
    None
}

/// Sum of per-token losses over every sentence in the batch, divided by the
/// number of predicted tokens.
fn batch_loss(
    tape: &mut Tape<f32>,
    src_module: &crate::registry::LangModule,
    src_binding: &Binding,
    tgt_module: &crate::registry::LangModule,
    tgt_binding: &Binding,
    batch: &Batch,
    smoothing: f32,
    mode: &mut ForwardMode,
) -> Result<(Var, u64)> {
    let mut per_sentence: Vec<Var> = Vec::with_capacity(batch.batch_size());
    let mut total_predicted: u64 = 0;
    for b in 0..batch.batch_size() {
        let source = match &batch.source {
            BatchSource::Text(tokens) => SourceData::Text(tokens.row(b).to_vec()),
            BatchSource::Speech(features) => SourceData::Speech(features.utterance(b)),
        };
        let enc_out = encode_source(tape, src_module, src_binding, &source, mode)?;
        let target_row = batch.targets.row(b);
        let prefix = &target_row[..target_row.len() - 1];
        let labels = &target_row[1..];
        let logits = crate::compose::decode_logits(tape, tgt_module, tgt_binding, prefix, enc_out, mode)?;
        let ce = tape.cross_entropy_smoothed(logits, labels, smoothing)?;
        per_sentence.push(ce);
        total_predicted += labels.len() as u64;
    }
    let mut total = per_sentence[0];
    for &v in &per_sentence[1..] {
        total = tape.add(total, v)?;
    }
    let loss = tape.scale(total, 1.0 / total_predicted as f32)?;
    Ok((loss, total_predicted))
}

/// Extracts per-parameter gradients of one bound module.
fn collect_grads(tape: &Tape<f32>, binding: &Binding) -> BTreeMap<String, Vec<f32>> {
    let mut grads = BTreeMap::new();
    for (name, var) in binding.iter() {
        if let Some(g) = tape.grad(var) {
            grads.insert(name.clone(), g.to_vec());
        }
    }
    grads
}

/// One optimizer step over one direction's batch. Returns the mean per-token
/// loss. Modules listed in `trainable` get bound with gradients; all others
/// involved are bound frozen.
#[allow(clippy::too_many_arguments)]
fn run_step(
    registry: &mut Registry,
    src_key: &ModuleKey,
    tgt_key: &ModuleKey,
    batch: &Batch,
    train_src: bool,
    train_tgt: bool,
    cfg: &TrainingConfig,
    state: &mut OptimizerState,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(f64, u64)> {
    let mut tape: Tape<f32> = Tape::new();
    let (src_binding, tgt_binding, loss_value, tokens) = {
        let src_module = registry.get(src_key)?;
        let tgt_module = registry.get(tgt_key)?;
        let src_binding = bind_store(&mut tape, &src_module.params, train_src && !src_module.frozen);
        let tgt_binding = bind_store(&mut tape, &tgt_module.params, train_tgt && !tgt_module.frozen);
        let mut mode = ForwardMode::Train { rng: dropout_rng };
        let (loss, tokens) = batch_loss(
            &mut tape,
            src_module,
            &src_binding,
            tgt_module,
            &tgt_binding,
            batch,
            cfg.label_smoothing,
            &mut mode,
        )?;
        tape.backward(loss)?;
        let loss_value = tape.value(loss).item() as f64;
        (src_binding, tgt_binding, loss_value, tokens)
    };
    if cfg.divergence_checks && !loss_value.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss on direction {}->{}",
            src_key.label(),
            tgt_key.label()
        )));
    }
    let src_grads = collect_grads(&tape, &src_binding);
    let tgt_grads = collect_grads(&tape, &tgt_binding);

    let (t, lr) = state.begin_step();
    if !src_grads.is_empty() {
        let label = src_key.label();
        let module = registry.get_mut(src_key)?;
        state.apply(&label, &mut module.params, &src_grads, t, lr, cfg.divergence_checks)?;
        module.train_steps += 1;
    }
    if !tgt_grads.is_empty() {
        let label = tgt_key.label();
        let module = registry.get_mut(tgt_key)?;
        state.apply(&label, &mut module.params, &tgt_grads, t, lr, cfg.divergence_checks)?;
        module.train_steps += 1;
    }
    Ok((loss_value, tokens))
}

/// Jointly trains all text directions round-robin in sorted direction-name
/// order. Every involved module must be thawed: the joint stage trains
/// everything.
pub fn train_joint_mt(
    registry: &mut Registry,
    directions: Vec<Direction>,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if directions.is_empty() {
        return Err(Error::config("joint MT needs at least one direction"));
    }
    let mut directions = directions;
    directions.sort_by_key(Direction::name);
    for d in &directions {
        if d.src.modality != crate::registry::Modality::Text {
            return Err(Error::config(format!(
                "joint MT direction {} has a non-text source",
                d.name()
            )));
        }
        if d.dataset.is_empty() {
            return Err(Error::config(format!("direction {} has an empty dataset", d.name())));
        }
        for key in [&d.src, &d.tgt] {
            if registry.get(key)?.frozen {
                return Err(Error::config(format!(
                    "module {} is frozen; the joint MT stage trains everything",
                    key.label()
                )));
            }
        }
    }

    let mut feeds: Vec<DirectionFeed> = directions
        .iter()
        .map(|d| DirectionFeed::new(&d.dataset, d.name(), cfg.batch_sentences, seed))
        .collect();
    let mut state = OptimizerState::new(cfg.schedule());
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "dropout", 0));

    for step in 1..=cfg.steps {
        let slot = ((step - 1) % directions.len() as u64) as usize;
        let batch = feeds[slot].next_batch()?;
        let d = &directions[slot];
        let (loss, tokens) =
            run_step(registry, &d.src, &d.tgt, &batch, true, true, cfg, &mut state, &mut dropout_rng)?;
        records.push(LossRecord { step, direction: d.name(), loss, lr: state.schedule.lr_at(step), tokens });
    }

    let per_direction = cfg.steps / directions.len() as u64;
    for d in &directions {
        registry.record_training(TrainingEvent {
            procedure: "train-mt".into(),
            src: d.src.label(),
            tgt: d.tgt.label(),
            steps: per_direction,
        });
    }
    let non_convergence = detect_non_convergence(&records);
    Ok(TrainOutcome { records, non_convergence })
}

/// Decoder handling during ASR pretraining: the end-to-end baseline trains
/// it, the language-specific variant keeps it frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AsrMode {
    Baseline,
    Langspec,
}

/// Trains the speech encoder against the same-language text decoder on
/// (speech, transcript) pairs. The adapter is attached later, at coupling.
pub fn pretrain_asr(
    registry: &mut Registry,
    speech_key: &ModuleKey,
    decoder_key: &ModuleKey,
    dataset: &Dataset,
    cfg: &TrainingConfig,
    seed: u64,
    mode: AsrMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("ASR dataset is empty"));
    }
    {
        let speech = registry.get(speech_key)?;
        match &speech.config {
            ModuleConfig::SpeechEncoder(c) if c.adapter.is_some() => {
                return Err(Error::config(
                    "speech encoder already has an adapter; it is attached at coupling time",
                ));
            }
            ModuleConfig::SpeechEncoder(_) => {}
            _ => return Err(Error::config(format!("'{speech_key}' is not a speech encoder"))),
        }
        registry.get(decoder_key)?;
    }
    let direction_name = format!("{}->{}", speech_key.label(), decoder_key.label());
    let feed_seed = seeding::derive(seed, "asr-feed", 0);
    let mut feed = DirectionFeed::new(dataset, direction_name.clone(), cfg.batch_sentences, feed_seed);
    let mut state = OptimizerState::new(cfg.schedule());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "dropout", 1));
    let train_decoder = mode == AsrMode::Baseline;

    let mut records = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let batch = feed.next_batch()?;
        let (loss, tokens) = run_step(
            registry,
            speech_key,
            decoder_key,
            &batch,
            true,
            train_decoder,
            cfg,
            &mut state,
            &mut dropout_rng,
        )?;
        records.push(LossRecord {
            step,
            direction: direction_name.clone(),
            loss,
            lr: state.schedule.lr_at(step),
            tokens,
        });
    }
    registry.record_training(TrainingEvent {
        procedure: format!("train-asr-{}", match mode {
            AsrMode::Baseline => "baseline",
            AsrMode::Langspec => "langspec",
        }),
        src: speech_key.label(),
        tgt: decoder_key.label(),
        steps: cfg.steps,
    });
    let non_convergence = detect_non_convergence(&records);
    Ok(TrainOutcome { records, non_convergence })
}

/// Attaches an identity-initialized adapter to a speech encoder.
pub fn attach_adapter(
    registry: &mut Registry,
    speech_key: &ModuleKey,
    adapter_cfg: AdapterConfig,
    seed: u64,
) -> Result<()> {
    adapter_cfg.validate()?;
    let module = registry.get_mut(speech_key)?;
    let ModuleConfig::SpeechEncoder(cfg) = &mut module.config else {
        return Err(Error::config(format!("'{speech_key}' is not a speech encoder")));
    };
    if cfg.adapter.is_some() {
        return Err(Error::config(format!("'{speech_key}' already has an adapter")));
    }
    let specs = adapter_param_specs("adapter", cfg.transformer.d_model, &adapter_cfg);
    let adapter_params = ParamStore::init(&specs, seeding::derive(seed, "adapter-init", 0));
    for (name, tensor) in adapter_params.iter() {
        module.params.insert(name.clone(), tensor.clone());
    }
    cfg.adapter = Some(adapter_cfg);
    Ok(())
}

/// Frozen-decoder coupling: optimizes cross entropy on (speech, target text)
/// pairs, updating only the speech encoder and its adapter. The target
/// decoder must already be trained; its parameters stay bitwise untouched.
#[allow(clippy::too_many_arguments)]
pub fn couple(
    registry: &mut Registry,
    speech_key: &ModuleKey,
    tgt_decoder_key: &ModuleKey,
    dataset: &Dataset,
    adapter_cfg: Option<AdapterConfig>,
    cfg: &TrainingConfig,
    seed: u64,
    from_scratch: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("coupling dataset is empty"));
    }
    {
        let decoder = registry.get(tgt_decoder_key)?;
        if decoder.train_steps == 0 {
            return Err(Error::config(format!(
                "target decoder '{tgt_decoder_key}' is untrained; couple against a trained decoder"
            )));
        }
        let speech = registry.get(speech_key)?;
        if !matches!(speech.config, ModuleConfig::SpeechEncoder(_)) {
            return Err(Error::config(format!("'{speech_key}' is not a speech encoder")));
        }
        if speech.train_steps == 0 && !from_scratch {
            return Err(Error::config(format!(
                "speech encoder '{speech_key}' is not pretrained; pass from_scratch to couple anyway"
            )));
        }
    }
    if let Some(adapter_cfg) = adapter_cfg {
        attach_adapter(registry, speech_key, adapter_cfg, seed)?;
    }

    let was_frozen = registry.get(tgt_decoder_key)?.frozen;
    registry.freeze(tgt_decoder_key)?;
    let result: Result<Vec<LossRecord>> = (|| {
        let direction_name = format!("{}->{}", speech_key.label(), tgt_decoder_key.label());
        let feed_seed = seeding::derive(seed, "couple-feed", 0);
        let mut feed =
            DirectionFeed::new(dataset, direction_name.clone(), cfg.batch_sentences, feed_seed);
        let mut state = OptimizerState::new(cfg.schedule());
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "dropout", 2));
        let mut records = Vec::with_capacity(cfg.steps as usize);
        for step in 1..=cfg.steps {
            let batch = feed.next_batch()?;
            let (loss, tokens) = run_step(
                registry,
                speech_key,
                tgt_decoder_key,
                &batch,
                true,
                false,
                cfg,
                &mut state,
                &mut dropout_rng,
            )?;
            records.push(LossRecord {
                step,
                direction: direction_name.clone(),
                loss,
                lr: state.schedule.lr_at(step),
                tokens,
            });
        }
        Ok(records)
    })();
    if !was_frozen {
        registry.thaw(tgt_decoder_key)?;
    }
    let records = result?;
    registry.record_training(TrainingEvent {
        procedure: "couple".into(),
        src: speech_key.label(),
        tgt: tgt_decoder_key.label(),
        steps: cfg.steps,
    });
    let non_convergence = detect_non_convergence(&records);
    Ok(TrainOutcome { records, non_convergence })
}
