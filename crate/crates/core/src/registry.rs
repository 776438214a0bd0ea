//! Store of independent per-language encoder and decoder modules, keyed by
//! (language, modality, role). Any encoder composes with any text decoder
//! through the shared d_model space; modules never share parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    count_params, text_decoder_param_specs, text_encoder_param_specs, ParamSpec, ParamStore,
    TextDecoderConfig, TextEncoderConfig,
};
use crate::speech::{speech_encoder_param_specs, SpeechEncoderConfig};
use crate::tensor::{read_named_tensors, write_named_tensors};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Encoder,
    Decoder,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ModuleKey {
    pub language: String,
    pub modality: Modality,
    pub role: Role,
}

impl ModuleKey {
    pub fn text_encoder(language: &str) -> Self {
        ModuleKey { language: language.to_string(), modality: Modality::Text, role: Role::Encoder }
    }

    pub fn text_decoder(language: &str) -> Self {
        ModuleKey { language: language.to_string(), modality: Modality::Text, role: Role::Decoder }
    }

    pub fn speech_encoder(language: &str) -> Self {
        ModuleKey { language: language.to_string(), modality: Modality::Speech, role: Role::Encoder }
    }

    /// "en.text.encoder" form used in file names, logs and the CLI.
    pub fn label(&self) -> String {
        format!("{}.{}.{}", self.language, self.modality.as_str(), self.role.as_str())
    }

    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() != 3 {
            return Err(Error::data(format!(
                "bad module key '{s}', expected <lang>.<modality>.<role>"
            )));
        }
        let modality = match parts[1] {
            "text" => Modality::Text,
            "speech" => Modality::Speech,
            other => return Err(Error::data(format!("unknown modality '{other}' in '{s}'"))),
        };
        let role = match parts[2] {
            "encoder" => Role::Encoder,
            "decoder" => Role::Decoder,
            other => return Err(Error::data(format!("unknown role '{other}' in '{s}'"))),
        };
        if parts[0].is_empty() {
            return Err(Error::data(format!("empty language in module key '{s}'")));
        }
        Ok(ModuleKey { language: parts[0].to_string(), modality, role })
    }
}

impl fmt::Display for ModuleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModuleConfig {
    TextEncoder(TextEncoderConfig),
    TextDecoder(TextDecoderConfig),
    SpeechEncoder(SpeechEncoderConfig),
}

impl ModuleConfig {
    pub fn d_model(&self) -> usize {
        match self {
            ModuleConfig::TextEncoder(c) => c.transformer.d_model,
            ModuleConfig::TextDecoder(c) => c.transformer.d_model,
            ModuleConfig::SpeechEncoder(c) => c.transformer.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModuleConfig::TextEncoder(c) => c.transformer.validate(),
            ModuleConfig::TextDecoder(c) => c.transformer.validate(),
            ModuleConfig::SpeechEncoder(c) => c.validate(),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            ModuleConfig::TextEncoder(c) => text_encoder_param_specs(c),
            ModuleConfig::TextDecoder(c) => text_decoder_param_specs(c),
            ModuleConfig::SpeechEncoder(c) => speech_encoder_param_specs(c),
        }
    }

    fn fits_key(&self, key: &ModuleKey) -> bool {
        matches!(
            (self, key.modality, key.role),
            (ModuleConfig::TextEncoder(_), Modality::Text, Role::Encoder)
                | (ModuleConfig::TextDecoder(_), Modality::Text, Role::Decoder)
                | (ModuleConfig::SpeechEncoder(_), Modality::Speech, Role::Encoder)
        )
    }
}

/// One registered encoder or decoder with its own disjoint parameter store.
#[derive(Clone, Debug)]
pub struct LangModule {
    pub config: ModuleConfig,
    pub params: ParamStore,
    pub frozen: bool,
    pub train_steps: u64,
}

/// A training event recorded for supervision bookkeeping: zero-shot cells are
/// exactly the routes that appear in no event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingEvent {
    pub procedure: String,
    pub src: String,
    pub tgt: String,
    pub steps: u64,
}

/// A runnable encoder -> decoder composition. Routing never consults
/// training history; untrained pairs route identically, which is what makes
/// zero-shot composition possible.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationPath {
    pub src: ModuleKey,
    pub tgt: ModuleKey,
}

#[derive(Clone, Debug, Default)]
pub struct Registry {
    modules: BTreeMap<ModuleKey, LangModule>,
    vocab_size: usize,
    vocab_fingerprint: u64,
    training_log: Vec<TrainingEvent>,
}

impl Registry {
    pub fn new(vocab_size: usize, vocab_fingerprint: u64) -> Self {
        Registry { modules: BTreeMap::new(), vocab_size, vocab_fingerprint, training_log: Vec::new() }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn vocab_fingerprint(&self) -> u64 {
        self.vocab_fingerprint
    }

    /// Seeded registration. Existing modules are untouched; duplicate keys
    /// are a conflict.
    pub fn register(&mut self, key: ModuleKey, config: ModuleConfig, seed: u64) -> Result<()> {
        if self.modules.contains_key(&key) {
            return Err(Error::config(format!("module '{key}' is already registered")));
        }
        if !config.fits_key(&key) {
            return Err(Error::config(format!(
                "config kind does not fit key '{key}' (decoders are text-only)"
            )));
        }
        config.validate()?;
        if let Some(existing) = self.modules.values().next() {
            if existing.config.d_model() != config.d_model() {
                return Err(Error::config(format!(
                    "d_model {} of '{key}' differs from the registry's {}",
                    config.d_model(),
                    existing.config.d_model()
                )));
            }
        }
        match &config {
            ModuleConfig::TextEncoder(c) if c.vocab_size != self.vocab_size => {
                return Err(Error::config(format!(
                    "module vocab {} differs from registry vocab {}",
                    c.vocab_size, self.vocab_size
                )));
            }
            ModuleConfig::TextDecoder(c) if c.vocab_size != self.vocab_size => {
                return Err(Error::config(format!(
                    "module vocab {} differs from registry vocab {}",
                    c.vocab_size, self.vocab_size
                )));
            }
            _ => {}
        }
        let params = ParamStore::init(&config.param_specs(), seed);
        self.modules.insert(key, LangModule { config, params, frozen: false, train_steps: 0 });
        Ok(())
    }

    pub fn contains(&self, key: &ModuleKey) -> bool {
        self.modules.contains_key(key)
    }

    pub fn get(&self, key: &ModuleKey) -> Result<&LangModule> {
        self.modules.get(key).ok_or_else(|| self.not_found(key))
    }

    pub fn get_mut(&mut self, key: &ModuleKey) -> Result<&mut LangModule> {
        if !self.modules.contains_key(key) {
            return Err(self.not_found(key));
        }
        Ok(self.modules.get_mut(key).expect("checked above"))
    }

    fn not_found(&self, key: &ModuleKey) -> Error {
        let available: Vec<String> = self.modules.keys().map(ModuleKey::label).collect();
        Error::not_found(format!(
            "module '{key}' is not registered; available: [{}]",
            available.join(", ")
        ))
    }

    pub fn keys(&self) -> impl Iterator<Item = &ModuleKey> {
        self.modules.keys()
    }

    pub fn modules(&self) -> impl Iterator<Item = (&ModuleKey, &LangModule)> {
        self.modules.iter()
    }

    pub fn encoder_keys(&self) -> Vec<ModuleKey> {
        self.modules.keys().filter(|k| k.role == Role::Encoder).cloned().collect()
    }

    pub fn decoder_keys(&self) -> Vec<ModuleKey> {
        self.modules.keys().filter(|k| k.role == Role::Decoder).cloned().collect()
    }

    /// Composes an encoder with a text decoder. No training-history check.
    pub fn route(&self, src: &ModuleKey, tgt: &ModuleKey) -> Result<TranslationPath> {
        let src_module = self.get(src)?;
        if src.role != Role::Encoder {
            return Err(Error::not_found(format!("'{src}' is not an encoder")));
        }
        let tgt_module = self.get(tgt)?;
        if tgt.role != Role::Decoder || tgt.modality != Modality::Text {
            return Err(self.not_found(tgt));
        }
        debug_assert_eq!(src_module.config.d_model(), tgt_module.config.d_model());
        Ok(TranslationPath { src: src.clone(), tgt: tgt.clone() })
    }

    pub fn freeze(&mut self, key: &ModuleKey) -> Result<()> {
        self.get_mut(key)?.frozen = true;
        Ok(())
    }

    pub fn thaw(&mut self, key: &ModuleKey) -> Result<()> {
        self.get_mut(key)?.frozen = false;
        Ok(())
    }

    pub fn record_training(&mut self, event: TrainingEvent) {
        self.training_log.push(event);
    }

    pub fn training_log(&self) -> &[TrainingEvent] {
        &self.training_log
    }

    /// True when some training event covered exactly this encoder/decoder
    /// pair.
    pub fn is_supervised_pair(&self, src: &ModuleKey, tgt: &ModuleKey) -> bool {
        let (src, tgt) = (src.label(), tgt.label());
        self.training_log.iter().any(|e| e.src == src && e.tgt == tgt)
    }

    pub fn total_params(&self) -> u64 {
        self.modules.values().map(|m| count_params(&m.params)).sum()
    }

    // ---- checkpoints ----

    /// Directory layout: `manifest.json` plus one sorted named-tensor file
    /// per module under `modules/`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("modules"))?;
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            vocab_size: self.vocab_size,
            vocab_fingerprint: format!("{:016x}", self.vocab_fingerprint),
            modules: self
                .modules
                .iter()
                .map(|(key, module)| ModuleEntry {
                    key: key.label(),
                    config: module.config.clone(),
                    frozen: module.frozen,
                    train_steps: module.train_steps,
                })
                .collect(),
            training_log: self.training_log.clone(),
        };
        let mut json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
        json.push('\n');
        std::fs::write(dir.join("manifest.json"), json)?;
        for (key, module) in &self.modules {
            let mut buf = Vec::new();
            write_named_tensors(&mut buf, module.params.tensors())?;
            std::fs::write(dir.join("modules").join(format!("{}.mbt", key.label())), buf)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Registry> {
        let manifest_path = dir.join("manifest.json");
        let json = std::fs::read_to_string(&manifest_path).map_err(|e| {
            Error::data(format!("cannot read checkpoint manifest {}: {e}", manifest_path.display()))
        })?;
        let manifest: CheckpointManifest = serde_json::from_str(&json)
            .map_err(|e| Error::data(format!("malformed checkpoint manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::data(format!(
                "checkpoint format version {} unsupported (expected {})",
                manifest.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let vocab_fingerprint = u64::from_str_radix(&manifest.vocab_fingerprint, 16)
            .map_err(|_| Error::data("bad vocab fingerprint in manifest"))?;
        let mut registry = Registry::new(manifest.vocab_size, vocab_fingerprint);
        registry.training_log = manifest.training_log;
        for entry in manifest.modules {
            let key = ModuleKey::parse(&entry.key)?;
            entry.config.validate()?;
            let params = read_module_params(dir, &key, &entry.config)?;
            registry.modules.insert(
                key,
                LangModule {
                    config: entry.config,
                    params,
                    frozen: entry.frozen,
                    train_steps: entry.train_steps,
                },
            );
        }
        Ok(registry)
    }

    /// Replaces exactly one module from another checkpoint, for incremental
    /// addition by file drop-in. Every other entry stays bitwise untouched.
    pub fn load_module_from(&mut self, dir: &Path, key: &ModuleKey) -> Result<()> {
        let other = Registry::load_checkpoint(dir)?;
        let module = other.get(key)?;
        self.modules.insert(key.clone(), module.clone());
        Ok(())
    }
}

fn read_module_params(dir: &Path, key: &ModuleKey, config: &ModuleConfig) -> Result<ParamStore> {
    let path = dir.join("modules").join(format!("{}.mbt", key.label()));
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::data(format!("cannot read module file {}: {e}", path.display())))?;
    let tensors = read_named_tensors(&mut bytes.as_slice())?;
    let store = ParamStore::from_tensors(tensors);
    // shape audit against the config's spec list
    let specs = config.param_specs();
    if specs.len() != store.len() {
        return Err(Error::data(format!(
            "module '{key}' has {} tensors, config expects {}",
            store.len(),
            specs.len()
        )));
    }
    for spec in &specs {
        let tensor = store.get(&spec.name).ok_or_else(|| {
            Error::data(format!("module '{key}' is missing parameter '{}'", spec.name))
        })?;
        if tensor.shape() != spec.shape.as_slice() {
            return Err(Error::data(format!(
                "parameter '{}' of '{key}' has shape {:?}, config expects {:?}",
                spec.name,
                tensor.shape(),
                spec.shape
            )));
        }
    }
    Ok(store)
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    vocab_size: usize,
    vocab_fingerprint: String,
    modules: Vec<ModuleEntry>,
    training_log: Vec<TrainingEvent>,
}

#[derive(Serialize, Deserialize)]
struct ModuleEntry {
    key: String,
    config: ModuleConfig,
    frozen: bool,
    train_steps: u64,
}
