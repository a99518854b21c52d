//! Named parameter storage shared by the encoder, decoders and optimizers.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::RunningStats;
use crate::tensor::Tensor;

/// Ordered collection of trainable tensors plus non-trainable batch-norm
/// statistics. Insertion order is stable and defines checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    stats: IndexMap<String, RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t.with_requires_grad(true));
        Ok(())
    }

    pub fn insert_stats(&mut self, name: impl Into<String>, stats: RunningStats) {
        self.stats.insert(name.into(), stats);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn get_index(&self, idx: usize) -> &Tensor {
        &self.params[idx]
    }

    pub fn get_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx]
    }

    pub fn stats_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        self.stats
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown batch-norm statistics `{name}`")))
    }

    pub fn stats(&self, name: &str) -> Option<&RunningStats> {
        self.stats.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters, optionally restricted by name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }
}

/// Normal(0, sqrt(2 / fan_in)) initialization for layers followed by ReLU.
pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Normal(0, sqrt(1 / fan_in)) for linear maps without a following ReLU.
pub fn lecun(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    normal(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
