//! Speech encoder frontend: three stride-2 convolutions over time x mel,
//! projection into the model dimension, transformer layers with a
//! log-distance attention bias, and an optional adapter at the end.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_forward, adapter_param_specs, AdapterConfig};
use crate::error::{Error, Result};
use crate::nn::{
    encoder_stack, encoder_stack_param_specs, sinusoidal_positions, AttentionBias, Binding,
    ForwardMode, ParamSpec, TransformerConfig,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Fewest input frames that survive three halvings with usable length.
pub const MIN_FRAMES: usize = 8;

/// Documentary metadata: features stand in for log-Mel frames computed with
/// 25 ms windows and a 10 ms hop. The artifact itself never touches audio.
pub const WINDOW_MS: u32 = 25;
pub const HOP_MS: u32 = 10;

pub const MBSF_MAGIC: &[u8; 4] = b"MBSF";
pub const MBSF_VERSION: u32 = 1;

/// One utterance's feature matrix, `[T x n_mels]`, validated finite and at
/// least [`MIN_FRAMES`] long.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramFeatures {
    frames: Tensor<f32>,
}

impl SpectrogramFeatures {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::data(format!(
                "features must be [T x n_mels], got shape {:?}",
                frames.shape()
            )));
        }
        if frames.shape()[0] < MIN_FRAMES {
            return Err(Error::data(format!(
                "speech input of {} frames is too short; at least {MIN_FRAMES} frames required",
                frames.shape()[0]
            )));
        }
        if !frames.is_finite() {
            return Err(Error::data("speech features contain non-finite values"));
        }
        Ok(SpectrogramFeatures { frames })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }
}

/// Geometry of the downsampling stack: three kernel-3, stride-2, padding-1
/// convolutions, each halving (ceil) the time and mel axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStackConfig {
    pub n_layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvStackConfig {
    fn default() -> Self {
        ConvStackConfig { n_layers: 3, channels: 16, kernel: 3, stride: 2, padding: 1 }
    }
}

impl ConvStackConfig {
    pub fn with_channels(channels: usize) -> Self {
        ConvStackConfig { channels, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != 3 {
            return Err(Error::config(format!(
                "conv stack requires 3x3 kernels, got {}",
                self.kernel
            )));
        }
        if self.n_layers != 3 || self.stride != 2 || self.padding != 1 {
            return Err(Error::config(
                "conv stack is fixed at 3 layers, stride 2, padding 1",
            ));
        }
        if self.channels == 0 {
            return Err(Error::config("conv channels must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechEncoderConfig {
    pub transformer: TransformerConfig,
    pub conv: ConvStackConfig,
    pub n_mels: usize,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
}

impl SpeechEncoderConfig {
    pub fn toy(n_mels: usize) -> Self {
        SpeechEncoderConfig {
            transformer: TransformerConfig::toy(),
            conv: ConvStackConfig::default(),
            n_mels,
            adapter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        self.conv.validate()?;
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be >= 1"));
        }
        if let Some(a) = &self.adapter {
            a.validate()?;
        }
        Ok(())
    }

    /// Mel-axis width after the three halvings (40 -> 20 -> 10 -> 5 at paper
    /// scale).
    pub fn reduced_mels(&self) -> usize {
        downsampled_len(self.n_mels)
    }

    /// Flattened (channels x reduced mel) width fed to the input projection.
    pub fn flat_width(&self) -> usize {
        self.conv.channels * self.reduced_mels()
    }
}

/// Length after the full stack: `ceil(ceil(ceil(t/2)/2)/2)`.
pub fn downsampled_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2).div_ceil(2)
}

pub fn speech_encoder_param_specs(cfg: &SpeechEncoderConfig) -> Vec<ParamSpec> {
    let c = cfg.conv.channels;
    let k = cfg.conv.kernel;
    let mut specs = Vec::new();
    for layer in 0..cfg.conv.n_layers {
        let c_in = if layer == 0 { 1 } else { c };
        specs.push(ParamSpec::glorot(format!("conv.{layer}.kernels"), vec![c, c_in, k, k]));
        specs.push(ParamSpec::zeros(format!("conv.{layer}.bias"), vec![c]));
    }
    specs.push(ParamSpec::glorot(
        "input_proj.w".to_string(),
        vec![cfg.flat_width(), cfg.transformer.d_model],
    ));
    specs.push(ParamSpec::zeros("input_proj.b".to_string(), vec![cfg.transformer.d_model]));
    specs.extend(encoder_stack_param_specs(&cfg.transformer));
    if let Some(a) = &cfg.adapter {
        specs.extend(adapter_param_specs("adapter", cfg.transformer.d_model, a));
    }
    specs
}

/// Conv stack over one utterance: `[T x M]` in, `[T' x (C*M')]` out, with the
/// channel and reduced-mel axes flattened per time step.
pub fn conv_downsample<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    cfg: &SpeechEncoderConfig,
    features: Var,
) -> Result<Var> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.n_mels {
        return Err(Error::dim(format!(
            "features shape {:?} does not match configured n_mels {}",
            shape, cfg.n_mels
        )));
    }
    if shape[0] < MIN_FRAMES {
        return Err(Error::data(format!(
            "speech input of {} frames is too short; at least {MIN_FRAMES} frames required",
            shape[0]
        )));
    }
    let mut x = tape.reshape(features, vec![1, shape[0], shape[1]])?;
    for layer in 0..cfg.conv.n_layers {
        let kernels = binding.var(&format!("conv.{layer}.kernels"))?;
        let bias = binding.var(&format!("conv.{layer}.bias"))?;
        x = tape.conv2d(x, kernels, bias)?;
        x = tape.relu(x)?;
    }
    tape.flatten_channels(x)
}

/// Full speech encoder: conv downsampling, projection to d_model, positions,
/// transformer layers with the log-distance bias, final layer norm, and the
/// adapter when configured. Output is `[T' x d_model]`.
pub fn speech_encoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    cfg: &SpeechEncoderConfig,
    features: Var,
    mode: &mut ForwardMode,
) -> Result<Var> {
    speech_encoder_forward_staged(tape, binding, cfg, features, mode, true)
}

/// Same as [`speech_encoder_forward`] but optionally stopping before the
/// adapter, exposing the pre-adapter representation for analysis.
pub fn speech_encoder_forward_staged<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    cfg: &SpeechEncoderConfig,
    features: Var,
    mode: &mut ForwardMode,
    apply_adapter: bool,
) -> Result<Var> {
    let conv_out = conv_downsample(tape, binding, cfg, features)?;
    let w = binding.var("input_proj.w")?;
    let b = binding.var("input_proj.b")?;
    let projected = tape.matmul(conv_out, w)?;
    let projected = tape.add_row(projected, b)?;

    let t_prime = tape.value(projected).shape()[0];
    let d_model = cfg.transformer.d_model;
    let pe = tape.constant(sinusoidal_positions(t_prime, d_model));
    let mut x = tape.add(projected, pe)?;
    x = mode.apply_dropout(tape, x, cfg.transformer.dropout)?;

    let bias = AttentionBias::log_distance()
        .matrix::<F>(t_prime, t_prime)
        .map(|m| tape.constant(m));
    let encoded = encoder_stack(tape, binding, &cfg.transformer, x, bias, mode)?;
    match &cfg.adapter {
        Some(_) if apply_adapter => adapter_forward(tape, binding, "adapter", encoded),
        _ => Ok(encoded),
    }
}

// ---- feature file format ----

pub fn write_features<W: Write>(w: &mut W, features: &SpectrogramFeatures) -> Result<()> {
    w.write_all(MBSF_MAGIC)?;
    w.write_all(&MBSF_VERSION.to_le_bytes())?;
    w.write_all(&(features.n_frames() as u32).to_le_bytes())?;
    w.write_all(&(features.n_mels() as u32).to_le_bytes())?;
    for &v in features.frames.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<SpectrogramFeatures> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::data("truncated feature file (magic)"))?;
    if &magic != MBSF_MAGIC {
        return Err(Error::data(format!(
            "bad feature magic {:?}, expected {:?}",
            magic, MBSF_MAGIC
        )));
    }
    let version = read_u32(r, "version")?;
    if version != MBSF_VERSION {
        return Err(Error::data(format!(
            "unsupported feature file version {version}, expected {MBSF_VERSION}"
        )));
    }
    let n_frames = read_u32(r, "n_frames")? as usize;
    let n_mels = read_u32(r, "n_mels")? as usize;
    let mut data = Vec::with_capacity(n_frames * n_mels);
    let mut buf = [0u8; 4];
    for _ in 0..n_frames * n_mels {
        r.read_exact(&mut buf)
            .map_err(|_| Error::data("truncated feature file (payload)"))?;
        data.push(f32::from_le_bytes(buf));
    }
    SpectrogramFeatures::new(Tensor::new(vec![n_frames, n_mels], data)?)
}

pub fn load_features(path: &std::path::Path) -> Result<SpectrogramFeatures> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read feature file {}: {e}", path.display())))?;
    read_features(&mut bytes.as_slice())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::data(format!("truncated feature file ({what})")))?;
    Ok(u32::from_le_bytes(buf))
}

// ---- length ratio measurement ----

/// Distribution of downsampled-speech-length over target-subword-length.
#[derive(Clone, Debug, Serialize)]
pub struct LengthRatioReport {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    /// Pairs excluded because the target side was empty.
    pub skipped: usize,
}

/// `pairs` yields (raw speech frame count, target subword count).
pub fn length_ratio_report(
    pairs: impl IntoIterator<Item = (usize, usize)>,
) -> Result<LengthRatioReport> {
    let mut count = 0usize;
    let mut skipped = 0usize;
    let mut sum = 0.0f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (frames, target_len) in pairs {
        if target_len == 0 {
            skipped += 1;
            continue;
        }
        let ratio = downsampled_len(frames) as f64 / target_len as f64;
        sum += ratio;
        min = min.min(ratio);
        max = max.max(ratio);
        count += 1;
    }
    if count == 0 {
        return Err(Error::data("length ratio requires at least one usable pair"));
    }
    Ok(LengthRatioReport { mean: sum / count as f64, min, max, count, skipped })
}
