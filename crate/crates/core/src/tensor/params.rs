use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::array::DenseArray;
use crate::error::{Error, Result};

/// Named trainable parameters in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, DenseArray>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: IndexMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Inserts `U(-bound, bound)` values drawn from `rng`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, DenseArray::new(shape, data)?)
    }

    /// Inserts `N(0, std^2)` values drawn from `rng`.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, DenseArray::new(shape, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseArray)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(DenseArray::len).sum()
    }

    /// A deterministic RNG for initialisation derived from the store seed.
    pub fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed)
    }

    /// A new store holding only the parameters whose name starts with one
    /// of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore {
            params,
            rng_seed: self.rng_seed,
        }
    }
}

/// Gradients keyed like the [`ParamStore`] they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: IndexMap<String, DenseArray>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(k, v)| (k.to_string(), DenseArray::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn add(&mut self, other: &Gradients) {
        for (k, v) in &mut self.grads {
            if let Some(o) = other.grads.get(k) {
                v.add_assign(o);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.grads.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(DenseArray::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(DenseArray::is_finite)
    }
}
