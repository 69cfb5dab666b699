use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable weights.
///
/// Initialisation draws from a ChaCha stream seeded by `seed`, consumed in
/// creation order, so building the same layout twice with the same seed
/// gives bitwise-identical values.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.params == other.params
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix on `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar entries across all parameters.
    pub fn entry_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameter name → tape handle for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradient per parameter; parameters the loss does not reach get zeros.
    pub fn collect(
        &self,
        grads: &mut Gradients,
        store: &ParamStore,
    ) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            let g = match grads.take(var) {
                Some(g) => g,
                None => Tensor::zeros(store.get(name)?.shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(store: &mut ParamStore) {
        store.init_uniform("a", 4, 3).unwrap();
        store.init_zeros("b", &[1, 3]).unwrap();
        store.init_uniform("c", 3, 2).unwrap();
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let (mut s1, mut s2) = (ParamStore::new(9), ParamStore::new(9));
        layout(&mut s1);
        layout(&mut s2);
        for ((n1, t1), (n2, t2)) in s1.iter().zip(s2.iter()) {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
        let mut s3 = ParamStore::new(10);
        layout(&mut s3);
        assert_ne!(s1.get("a").unwrap(), s3.get("a").unwrap());
    }

    #[test]
    fn glorot_bound_respected() {
        let mut s = ParamStore::new(1);
        s.init_uniform("w", 10, 6).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(s.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(1);
        s.init_zeros("x", &[1, 1]).unwrap();
        assert!(matches!(
            s.init_zeros("x", &[1, 1]),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut s = ParamStore::new(1);
        layout(&mut s);
        let tape = Tape::new();
        let bound = s.bind(&tape);
        let loss = tape.sum(bound.get("a").unwrap());
        let mut grads = tape.backward(loss).unwrap();
        let g = bound.collect(&mut grads, &s).unwrap();
        assert_eq!(g["a"], Tensor::full(&[4, 3], 1.0));
        assert_eq!(g["c"], Tensor::zeros(&[3, 2]));
    }
}
