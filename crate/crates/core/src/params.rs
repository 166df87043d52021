//! Named parameter storage with seeded, order-independent initialization.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    value: Vec<f64>,
    #[serde(skip)]
    grad: Vec<f64>,
}

// Stores compare by their parameters; gradients are scratch state.
impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.value == other.value
    }
}

/// Parameters keyed by stable string names, plus the accumulated gradients of
/// the most recent backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Entry>,
}

fn key_hash(key: &str) -> u64 {
    // FNV-1a
    key.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers `key`. Each key draws from its own stream derived from
    /// `(seed, key)`, so values do not depend on registration order.
    pub fn init(&mut self, key: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.params.contains_key(key) {
            return Err(Error::pre("ParamStore::init", format!("duplicate key {key}")));
        }
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::XavierUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ key_hash(key));
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        self.params.insert(
            key.to_string(),
            Entry {
                shape: shape.to_vec(),
                value,
                grad: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: Tensor) {
        let n = value.len();
        self.params.insert(
            key.to_string(),
            Entry {
                shape: value.shape().to_vec(),
                value: value.into_data(),
                grad: vec![0.0; n],
            },
        );
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|e| e.value.len()).sum()
    }

    fn entry(&self, key: &str) -> Result<&Entry> {
        self.params
            .get(key)
            .ok_or_else(|| Error::pre("ParamStore", format!("unknown parameter {key}")))
    }

    fn entry_mut(&mut self, key: &str) -> Result<&mut Entry> {
        self.params
            .get_mut(key)
            .ok_or_else(|| Error::pre("ParamStore", format!("unknown parameter {key}")))
    }

    pub fn shape(&self, key: &str) -> Result<&[usize]> {
        Ok(&self.entry(key)?.shape)
    }

    pub fn value(&self, key: &str) -> Result<&[f64]> {
        Ok(&self.entry(key)?.value)
    }

    pub fn value_mut(&mut self, key: &str) -> Result<&mut [f64]> {
        Ok(&mut self.entry_mut(key)?.value)
    }

    pub fn tensor(&self, key: &str) -> Result<Tensor> {
        let e = self.entry(key)?;
        Tensor::new(e.shape.clone(), e.value.clone())
    }

    pub fn matrix(&self, key: &str) -> Result<Matrix> {
        self.tensor(key)?.to_matrix()
    }

    pub fn set_value(&mut self, key: &str, data: &[f64]) -> Result<()> {
        let e = self.entry_mut(key)?;
        if e.value.len() != data.len() {
            return Err(Error::shape("ParamStore::set_value", e.value.len(), data.len()));
        }
        e.value.copy_from_slice(data);
        Ok(())
    }

    pub fn grad(&self, key: &str) -> Result<&[f64]> {
        Ok(&self.entry(key)?.grad)
    }

    pub(crate) fn set_grad(&mut self, key: &str, grad: Vec<f64>) -> Result<()> {
        let e = self.entry_mut(key)?;
        if e.value.len() != grad.len() {
            return Err(Error::shape("ParamStore::set_grad", e.value.len(), grad.len()));
        }
        e.grad = grad;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.params.values_mut() {
            e.grad = vec![0.0; e.value.len()];
        }
    }

    /// Sets every entry of every parameter whose key starts with `prefix`.
    pub fn fill_prefix(&mut self, prefix: &str, v: f64) {
        for (k, e) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                e.value.iter_mut().for_each(|x| *x = v);
            }
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params.values().flat_map(|e| &e.grad).map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.grad_norm();
        if n > max_norm {
            let f = max_norm / n;
            self.params.values_mut().for_each(|e| e.grad.iter_mut().for_each(|g| *g *= f));
        }
        n
    }

    /// `θ ← θ − lr·∇θ` over every parameter.
    pub fn sgd_step(&mut self, lr: f64) {
        for e in self.params.values_mut() {
            for (v, g) in e.value.iter_mut().zip(&e.grad) {
                *v -= lr * g;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("parameter store serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut store: ParamStore =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("parameter file: {e}")))?;
        for (k, e) in store.params.iter_mut() {
            if e.shape.iter().product::<usize>() != e.value.len() {
                return Err(Error::Format(format!("parameter {k}: shape/value length mismatch")));
            }
            e.grad = vec![0.0; e.value.len()];
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
