use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    Zeros,
    Ones,
    /// Scaled uniform in `[-limit, limit]`, `limit = sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
}

/// Name, shape and initialization of one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl ParamSpec {
    pub fn zeros(name: String, shape: Vec<usize>) -> Self {
        ParamSpec { name, shape, init: InitKind::Zeros }
    }

    pub fn ones(name: String, shape: Vec<usize>) -> Self {
        ParamSpec { name, shape, init: InitKind::Ones }
    }

    /// Glorot with fans taken from the shape: (rows, cols) for matrices,
    /// (C_in*kh*kw, C_out*kh*kw) for conv kernels.
    pub fn glorot(name: String, shape: Vec<usize>) -> Self {
        let (fan_in, fan_out) = match shape.len() {
            2 => (shape[0], shape[1]),
            4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
            _ => {
                let n: usize = shape.iter().product();
                (n, n)
            }
        };
        ParamSpec { name, shape, init: InitKind::Glorot { fan_in, fan_out } }
    }
}

/// Named f32 parameter tensors of one module. Keys are unique; iteration is
/// in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    /// Samples parameters in spec order from a ChaCha stream so the same
    /// (specs, seed) pair always produces identical values.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for spec in specs {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<f32> = match spec.init {
                InitKind::Zeros => vec![0.0; numel],
                InitKind::Ones => vec![1.0; numel],
                InitKind::Glorot { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-limit..limit) as f32).collect()
                }
            };
            let prev = params.insert(
                spec.name.clone(),
                Tensor::new(spec.shape.clone(), data).expect("spec shape matches data"),
            );
            assert!(prev.is_none(), "duplicate parameter name {}", spec.name);
        }
        ParamStore { params }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor<f32>>) -> Self {
        ParamStore { params: tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: String, tensor: Tensor<f32>) {
        self.params.insert(name, tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.params.iter_mut()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    /// FNV-1a over names and exact value bits; used by freeze audits.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        };
        for (name, tensor) in &self.params {
            for b in name.as_bytes() {
                eat(*b);
            }
            for v in tensor.data() {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
        }
        hash
    }
}

/// Names resolved to tape nodes for one bound module.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Wraps vars that are already on a tape; gradient checks use this to
    /// treat checker-created leaves as module parameters.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::not_found(format!("parameter '{name}' not bound")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, v)| (n, *v))
    }
}

/// Inserts every parameter of `store` into the tape as a leaf.
pub fn bind_store<F: Scalar>(tape: &mut Tape<F>, store: &ParamStore, trainable: bool) -> Binding {
    let mut vars = BTreeMap::new();
    for (name, tensor) in store.iter() {
        let leaf = tape.leaf(tensor.cast::<F>(), trainable);
        vars.insert(name.clone(), leaf);
    }
    Binding { vars }
}

/// Binds explicit tensors; used by gradient checks that need f64 parameters.
pub fn bind_tensors<F: Scalar>(
    tape: &mut Tape<F>,
    tensors: impl IntoIterator<Item = (String, Tensor<F>)>,
    trainable: bool,
) -> Binding {
    let mut vars = BTreeMap::new();
    for (name, tensor) in tensors {
        let leaf = tape.leaf(tensor, trainable);
        vars.insert(name, leaf);
    }
    Binding { vars }
}
