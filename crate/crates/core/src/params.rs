//! Named parameter storage and initialization.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Init gain for the last layer of a residual branch, so stacked blocks stay
/// close to identity at the start of training.
pub const RESIDUAL_GAIN: f64 = 0.2;

/// Parameter tensors keyed by dotted module path (`enc.ir.s1.apg.query`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Convenience for building a store with a shared RNG.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.insert(name, t);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::full(shape, 1.0));
    }

    /// He-normal conv kernel `[Cout, Cin, k, k]` plus zero bias.
    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.conv_scaled(prefix, cin, cout, k, 2f64.sqrt());
    }

    /// Conv kernel with std `gain / sqrt(fan_in)` plus zero bias.
    pub fn conv_scaled(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let std = gain / ((cin * k * k) as f64).sqrt();
        self.normal(&format!("{prefix}.weight"), &[cout, cin, k, k], std);
        self.zeros(&format!("{prefix}.bias"), &[cout]);
    }

    /// Linear map `[Cin, Cout]` with fan-in scaled init plus zero bias.
    pub fn linear(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.linear_scaled(prefix, cin, cout, 1.0);
    }

    pub fn linear_scaled(&mut self, prefix: &str, cin: usize, cout: usize, gain: f64) {
        let std = gain / (cin as f64).sqrt();
        self.normal(&format!("{prefix}.weight"), &[cin, cout], std);
        self.zeros(&format!("{prefix}.bias"), &[cout]);
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.ones(&format!("{prefix}.gain"), &[dim]);
        self.zeros(&format!("{prefix}.shift"), &[dim]);
    }
}
