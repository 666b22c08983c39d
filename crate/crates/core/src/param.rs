//! Named learnable parameters and deterministic initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanInUniform { fan_in: usize },
    Normal { std: f64 },
}

/// Owns every parameter of a model. Names are unique; ids are dense indices.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, ParamId>,
    seed: u64,
}

/// FNV-1a; stable across platforms and toolchains, unlike `DefaultHasher`.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore { params: Vec::new(), index: BTreeMap::new(), seed }
    }

    /// Registers a parameter. Its initial values depend only on the store seed
    /// and the name, so models that share a sub-network initialize it identically.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::ZERO; numel],
            Init::Const(v) => vec![T::of(v); numel],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
            }
            Init::FanInUniform { fan_in } => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
            }
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..numel).map(|_| T::of(normal.sample(&mut rng))).collect()
            }
        };
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), value: Tensor::new(shape.to_vec(), data)?, grad: None });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Parameter names in sorted order with their ids.
    pub fn sorted(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.index.iter().map(|(n, &id)| (n.as_str(), id))
    }

    /// Total scalar count of parameters whose name starts with any prefix.
    pub fn count_with_prefix(&self, prefixes: &[&str]) -> usize {
        self.params
            .iter()
            .filter(|p| prefixes.is_empty() || prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn count_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|p| pred(&p.name)).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}
