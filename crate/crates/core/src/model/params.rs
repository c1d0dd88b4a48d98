//! Named parameter collections.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Ordered map from parameter name to array. Iteration order is the name
/// order, which keeps hashing, checkpoints and updates deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    arrays: BTreeMap<String, ArrayD<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f32>) {
        self.arrays.insert(name.into(), value.as_standard_layout().into_owned());
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        self.arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f32>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f32>)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Adds `other` into `self` name by name, creating missing entries.
    pub fn accumulate(&mut self, other: &ParamSet) {
        for (k, v) in &other.arrays {
            match self.arrays.get_mut(k) {
                Some(acc) => *acc += v,
                None => {
                    self.arrays.insert(k.clone(), v.clone());
                }
            }
        }
    }

    /// Adds `value` into the entry `name`, creating it if absent.
    pub fn add_to(&mut self, name: &str, value: ArrayD<f32>) {
        match self.arrays.get_mut(name) {
            Some(acc) => *acc += &value,
            None => {
                self.arrays.insert(name.to_string(), value);
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for v in self.arrays.values_mut() {
            v.mapv_inplace(|x| x * factor);
        }
    }

    pub fn same_shapes(&self, other: &ParamSet) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Little-endian bytes of every array in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4);
        for (name, v) in &self.arrays {
            out.extend_from_slice(name.as_bytes());
            for &x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over names and parameter bytes.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f32 {
        self.arrays
            .iter()
            .map(|(k, v)| {
                let o = other.get(k);
                v.iter().zip(o.iter()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0, f32::max)
    }
}

/// Seeded initialiser: one ChaCha stream per parameter, derived from the
/// base seed and the parameter name.
pub(crate) struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let digest = Sha256::digest(name.as_bytes());
        let mut tag = [0u8; 8];
        tag.copy_from_slice(&digest[..8]);
        ChaCha8Rng::seed_from_u64(self.seed ^ u64::from_le_bytes(tag))
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f32) -> ArrayD<f32> {
        let mut rng = self.rng_for(name);
        let dist = Normal::new(0.0f32, std).expect("positive std");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(&mut rng))
    }

    /// He-normal weights for a layer with `fan_in` inputs.
    pub fn kaiming(&self, name: &str, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
        self.normal(name, shape, (2.0 / fan_in as f32).sqrt())
    }
}

pub(crate) fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}
