//! Adam with the inverse-square-root warmup schedule. Frozen parameters get
//! no state entries and no updates; state round-trips through checkpoints
//! bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{read_named_tensors, write_named_tensors, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Linear warmup to `peak_lr` over `warmup_steps`, then decay as
/// `sqrt(warmup / step)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        debug_assert!(step >= 1);
        let warmup = self.warmup_steps.max(1) as f64;
        if step <= self.warmup_steps {
            self.peak_lr * step as f64 / warmup
        } else {
            self.peak_lr * (warmup / step as f64).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct MomentPair {
    m: Tensor<f32>,
    v: Tensor<f32>,
}

/// Per-parameter first/second moment estimates plus the step counter and
/// schedule.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub schedule: LrSchedule,
    step: u64,
    moments: BTreeMap<String, MomentPair>,
}

impl OptimizerState {
    pub fn new(schedule: LrSchedule) -> Self {
        OptimizerState { schedule, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked_params(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    /// Advances the step counter and returns (t, lr(t)).
    pub fn begin_step(&mut self) -> (u64, f64) {
        self.step += 1;
        (self.step, self.schedule.lr_at(self.step))
    }

    /// Applies one Adam update to a module's parameters. `grads` maps
    /// parameter names to flat gradient buffers; parameters without a
    /// gradient are skipped entirely (frozen modules never reach here).
    pub fn apply(
        &mut self,
        module_label: &str,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f32>>,
        t: u64,
        lr: f64,
        divergence_checks: bool,
    ) -> Result<()> {
        let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for (name, grad) in grads {
            let state_key = format!("{module_label}/{name}");
            let Some(param) = store.get_mut(name) else {
                return Err(Error::not_found(format!(
                    "gradient for unknown parameter '{state_key}'"
                )));
            };
            if grad.len() != param.numel() {
                return Err(Error::dim(format!(
                    "gradient for '{state_key}' has {} entries, parameter has {}",
                    grad.len(),
                    param.numel()
                )));
            }
            if divergence_checks {
                if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "non-finite gradient in '{state_key}' at element {pos}"
                    )));
                }
            }
            let pair = self.moments.entry(state_key.clone()).or_insert_with(|| MomentPair {
                m: Tensor::zeros(param.shape().to_vec()),
                v: Tensor::zeros(param.shape().to_vec()),
            });
            let (m, v) = (pair.m.data_mut(), pair.v.data_mut());
            let p = param.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] as f64;
                let m_new = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * g;
                let v_new = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
                m[i] = m_new as f32;
                v[i] = v_new as f32;
                let m_hat = m_new / bias1;
                let v_hat = v_new / bias2;
                p[i] = (p[i] as f64 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
            }
            if divergence_checks {
                if let Some(pos) = p.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "non-finite parameter in '{state_key}' at element {pos} after update"
                    )));
                }
            }
        }
        Ok(())
    }

    // ---- checkpoint round trip ----

    /// Writes `optim/state.json` and `optim/moments.mbt` under the
    /// checkpoint directory.
    pub fn save(&self, ckpt_dir: &Path) -> Result<()> {
        let dir = ckpt_dir.join("optim");
        std::fs::create_dir_all(&dir)?;
        let meta = OptimMeta { step: self.step, schedule: self.schedule.clone() };
        let mut json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::data(format!("optimizer state serialization failed: {e}")))?;
        json.push('\n');
        std::fs::write(dir.join("state.json"), json)?;

        let mut tensors = BTreeMap::new();
        for (key, pair) in &self.moments {
            tensors.insert(format!("{key}.m"), pair.m.clone());
            tensors.insert(format!("{key}.v"), pair.v.clone());
        }
        let mut buf = Vec::new();
        write_named_tensors(&mut buf, &tensors)?;
        std::fs::write(dir.join("moments.mbt"), buf)?;
        Ok(())
    }

    /// Loads optimizer state if the checkpoint carries one.
    pub fn load(ckpt_dir: &Path) -> Result<Option<OptimizerState>> {
        let dir = ckpt_dir.join("optim");
        if !dir.join("state.json").exists() {
            return Ok(None);
        }
        let json = std::fs::read_to_string(dir.join("state.json"))?;
        let meta: OptimMeta = serde_json::from_str(&json)
            .map_err(|e| Error::data(format!("malformed optimizer state: {e}")))?;
        let bytes = std::fs::read(dir.join("moments.mbt"))?;
        let tensors = read_named_tensors(&mut bytes.as_slice())?;
        let mut moments: BTreeMap<String, MomentPair> = BTreeMap::new();
        for (name, tensor) in tensors {
            let (key, kind) = name
                .rsplit_once('.')
                .ok_or_else(|| Error::data(format!("bad moment tensor name '{name}'")))?;
            let entry = moments.entry(key.to_string()).or_insert_with(|| MomentPair {
                m: Tensor::zeros(tensor.shape().to_vec()),
                v: Tensor::zeros(tensor.shape().to_vec()),
            });
            match kind {
                "m" => entry.m = tensor,
                "v" => entry.v = tensor,
                other => return Err(Error::data(format!("unknown moment kind '{other}'"))),
            }
        }
        Ok(Some(OptimizerState { schedule: meta.schedule, step: meta.step, moments }))
    }
}

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    step: u64,
    schedule: LrSchedule,
}
