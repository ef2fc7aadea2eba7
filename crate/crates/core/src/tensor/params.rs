use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization scheme for a freshly registered parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named, ordered collection of model parameters.
///
/// A store created with [`ParamStore::shapes_only`] records names and shapes
/// but allocates no storage; it is used for cost accounting of configurations
/// too large to materialize.
#[derive(Clone, Debug)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    seed: u64,
    materialize: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            specs: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            seed,
            materialize: true,
        }
    }

    pub fn shapes_only() -> Self {
        ParamStore {
            materialize: false,
            ..Self::new(0)
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.materialize
    }

    /// Registers a parameter whose random initialization is keyed by its own
    /// name.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.add_keyed(name, name, shape, init)
    }

    /// Registers a parameter whose random initialization is keyed by
    /// `init_key`, so two differently named parameters can start identical.
    pub fn add_keyed(&mut self, name: &str, init_key: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.specs.len();
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        self.index.insert(name.to_string(), id);
        if self.materialize {
            let n: usize = shape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, fnv1a(init_key)));
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
                Init::Normal(std) => (0..n)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            };
            self.values.push(Tensor::new(shape.to_vec(), data).expect("shape product"));
        }
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.specs[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.specs[id.0].shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                lhs: self.specs[id.0].shape.clone(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(ParamSpec::numel)
            .sum()
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer over two words; used to derive independent rng seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_init_matches() {
        let mut s = ParamStore::new(3);
        let a = s.add("a.w", &[4, 3], Init::FanIn(4));
        let b = s.add_keyed("b.w", "a.w", &[4, 3], Init::FanIn(4));
        let c = s.add("c.w", &[4, 3], Init::FanIn(4));
        assert_eq!(s.get(a), s.get(b));
        assert_ne!(s.get(a), s.get(c));
        assert_eq!(s.num_scalars(), 36);
    }

    #[test]
    fn shapes_only_allocates_nothing() {
        let mut s = ParamStore::shapes_only();
        s.add("big", &[100_000, 10_000], Init::Zeros);
        assert_eq!(s.num_scalars(), 1_000_000_000);
        assert!(!s.is_materialized());
    }
}
