//! Residual bridging module placed after a speech encoder's final layer
//! norm: layer norm, up-projection with ReLU, down-projection, then a
//! residual sum with the input. The down-projection starts at zero, so a
//! fresh adapter is exactly the identity map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Binding, InitKind, ParamSpec, LAYER_NORM_EPS};
use crate::tensor::{Scalar, Tape, Var};

/// Projection sizes swept at paper scale (d_model 512).
pub const PAPER_SWEEP_SIZES: [usize; 7] = [128, 256, 512, 1024, 2048, 4096, 9120];

/// Scaled-down sweep grid for the toy d_model of 64.
pub const TOY_SWEEP_SIZES: [usize; 6] = [8, 16, 32, 64, 128, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub d_proj: usize,
    /// Zero-init the down-projection so the module starts as the identity.
    /// Disable to get a fully random init.
    #[serde(default = "default_identity_init")]
    pub identity_init: bool,
}

fn default_identity_init() -> bool {
    true
}

impl AdapterConfig {
    pub fn new(d_proj: usize) -> Self {
        AdapterConfig { d_proj, identity_init: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_proj == 0 {
            return Err(Error::config("adapter projection size must be >= 1"));
        }
        Ok(())
    }
}

/// Scalar parameter count: `2*d_model*d_proj + d_proj + d_model + 2*d_model`.
pub fn adapter_param_count(d_model: usize, d_proj: usize) -> u64 {
    (2 * d_model * d_proj + d_proj + 3 * d_model) as u64
}

pub fn adapter_param_specs(prefix: &str, d_model: usize, cfg: &AdapterConfig) -> Vec<ParamSpec> {
    let down_init = if cfg.identity_init {
        InitKind::Zeros
    } else {
        InitKind::Glorot { fan_in: cfg.d_proj, fan_out: d_model }
    };
    vec![
        ParamSpec::ones(format!("{prefix}.ln.gain"), vec![d_model]),
        ParamSpec::zeros(format!("{prefix}.ln.bias"), vec![d_model]),
        ParamSpec::glorot(format!("{prefix}.w1"), vec![d_model, cfg.d_proj]),
        ParamSpec::zeros(format!("{prefix}.b1"), vec![cfg.d_proj]),
        ParamSpec {
            name: format!("{prefix}.w2"),
            shape: vec![cfg.d_proj, d_model],
            init: down_init,
        },
        ParamSpec::zeros(format!("{prefix}.b2"), vec![d_model]),
    ]
}

/// The projection branch alone: `w2 * relu(w1 * layer_norm(h) + b1) + b2`.
pub fn adapter_branch<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    prefix: &str,
    h: Var,
) -> Result<Var> {
    let gain = binding.var(&format!("{prefix}.ln.gain"))?;
    let bias = binding.var(&format!("{prefix}.ln.bias"))?;
    let w1 = binding.var(&format!("{prefix}.w1"))?;
    let b1 = binding.var(&format!("{prefix}.b1"))?;
    let w2 = binding.var(&format!("{prefix}.w2"))?;
    let b2 = binding.var(&format!("{prefix}.b2"))?;

    let normed = tape.layer_norm(h, gain, bias, F::from_f64c(LAYER_NORM_EPS))?;
    let up = tape.matmul(normed, w1)?;
    let up = tape.add_row(up, b1)?;
    let up = tape.relu(up)?;
    let down = tape.matmul(up, w2)?;
    tape.add_row(down, b2)
}

/// `h + branch(h)`; output length and width equal the input's.
pub fn adapter_forward<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    prefix: &str,
    h: Var,
) -> Result<Var> {
    let branch = adapter_branch(tape, binding, prefix, h)?;
    tape.add(h, branch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind_store, count_params, ParamStore};
    use crate::tensor::Tensor;

    fn input(t: usize, d: usize) -> Tensor<f64> {
        Tensor::new(vec![t, d], (0..t * d).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap()
    }

    #[test]
    fn fresh_adapter_is_identity_bitwise() {
        let cfg = AdapterConfig::new(32);
        let store = ParamStore::init(&adapter_param_specs("adapter", 16, &cfg), 4);
        let mut tape: Tape<f32> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        let h = tape.constant(input(5, 16).cast());
        let out = adapter_forward(&mut tape, &binding, "adapter", h).unwrap();
        let (hv, ov) = (tape.value(h).data(), tape.value(out).data());
        assert!(hv.iter().zip(ov).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = AdapterConfig::new(32);
        let specs = adapter_param_specs("adapter", 16, &cfg);
        assert_eq!(ParamStore::init(&specs, 7), ParamStore::init(&specs, 7));
    }

    #[test]
    fn random_init_flag_breaks_identity() {
        let cfg = AdapterConfig { d_proj: 32, identity_init: false };
        let store = ParamStore::init(&adapter_param_specs("adapter", 16, &cfg), 4);
        let mut tape: Tape<f64> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        let h = tape.constant(input(5, 16));
        let out = adapter_forward(&mut tape, &binding, "adapter", h).unwrap();
        assert_ne!(tape.value(h).data(), tape.value(out).data());
    }

    #[test]
    fn output_shape_matches_input_for_any_length() {
        let cfg = AdapterConfig::new(8);
        let store = ParamStore::init(&adapter_param_specs("adapter", 16, &cfg), 4);
        for t in [1, 3, 17] {
            let mut tape: Tape<f64> = Tape::new();
            let binding = bind_store(&mut tape, &store, false);
            let h = tape.constant(input(t, 16));
            let out = adapter_forward(&mut tape, &binding, "adapter", h).unwrap();
            assert_eq!(tape.value(out).shape(), &[t, 16]);
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for (d_model, d_proj) in [(512usize, 4096usize), (512, 512), (64, 32)] {
            let cfg = AdapterConfig::new(d_proj);
            let store = ParamStore::init(&adapter_param_specs("adapter", d_model, &cfg), 0);
            assert_eq!(count_params(&store), adapter_param_count(d_model, d_proj));
        }
        assert_eq!(adapter_param_count(512, 4096), 4_199_936);
        assert_eq!(adapter_param_count(512, 512), 526_336);
    }

    #[test]
    fn module_is_exactly_input_plus_branch() {
        // the residual form means the module can only add to the base
        // representation, never erase it
        let cfg = AdapterConfig { d_proj: 24, identity_init: false };
        let store = ParamStore::init(&adapter_param_specs("adapter", 16, &cfg), 9);
        let mut tape: Tape<f64> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        let h = tape.constant(input(6, 16));
        let out = adapter_forward(&mut tape, &binding, "adapter", h).unwrap();
        let branch = adapter_branch(&mut tape, &binding, "adapter", h).unwrap();
        let sum = tape.add(h, branch).unwrap();
        let (a, b) = (tape.value(out).data(), tape.value(sum).data());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(tape.value(branch).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn full_module_gradient_check() {
        let cfg = AdapterConfig { d_proj: 6, identity_init: false };
        let specs = adapter_param_specs("adapter", 4, &cfg);
        let store = ParamStore::init(&specs, 21);
        let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let tensors: Vec<Tensor<f64>> =
            names.iter().map(|n| store.get(n).unwrap().cast()).collect();
        let mut inputs = vec![input(3, 4)];
        inputs.extend(tensors);

        let names2 = names.clone();
        let worst = crate::gradcheck::check_gradients(
            &move |tape, vars| {
                let h = vars[0];
                let mut map = std::collections::BTreeMap::new();
                for (name, var) in names2.iter().zip(&vars[1..]) {
                    map.insert(name.clone(), *var);
                }
                let binding = Binding::from_vars(map);
                let out = adapter_forward(tape, &binding, "adapter", h)?;
                tape.sum_all(out)
            },
            &inputs,
            crate::gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        assert!(worst <= crate::gradcheck::DEFAULT_TOLERANCE, "max rel err {worst}");
    }
}
