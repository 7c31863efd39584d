//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameters and buffers keyed by dot-separated path. Iteration is lexicographic.
///
/// Trainable entries carry `requires_grad = true`; buffers (batch-norm running
/// statistics) do not and are never touched by the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.insert(name, t.with_requires_grad(true))
    }

    pub fn insert_buffer(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.insert(name, t.with_requires_grad(false))
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter path {name}")));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter path {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter path {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, t)| t.requires_grad())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Maps parameter paths to leaves on one tape, loading each at most once.
#[derive(Default)]
pub struct Binder {
    bound: BTreeMap<String, Var>,
    derived: BTreeMap<String, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let mut copy = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        copy.set_requires_grad(t.requires_grad());
        let v = tape.leaf(copy);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Returns the value cached under `key`, recording it with `make` on first use.
    /// Derived values are not parameters and never appear in [`Binder::take_grads`].
    pub fn derived(&mut self, key: &str, make: impl FnOnce() -> Result<Var>) -> Result<Var> {
        if let Some(&v) = self.derived.get(key) {
            return Ok(v);
        }
        let v = make()?;
        self.derived.insert(key.to_string(), v);
        Ok(v)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Moves the gradients of every bound trainable leaf out of the tape. Leaves that
    /// the loss does not reach get a zero gradient.
    pub fn take_grads(&self, tape: &mut Tape) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if !tape.value(v).requires_grad() {
                continue;
            }
            let n = tape.value(v).len();
            out.insert(name.clone(), tape.take_grad(v).unwrap_or_else(|| vec![0.0; n]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParamStore::new();
        s.insert_param("fc2.weight", Tensor::zeros(&[1])).unwrap();
        s.insert_param("conv1.weight", Tensor::zeros(&[1])).unwrap();
        s.insert_buffer("bn1.running_mean", Tensor::zeros(&[1])).unwrap();
        let names: Vec<_> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["bn1.running_mean", "conv1.weight", "fc2.weight"]);
        assert_eq!(s.trainable().count(), 2);
        assert!(s.insert_param("fc2.weight", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn fan_in_bounds_hold() {
        let mut rng = rng_from(3);
        let t = fan_in_uniform(&[64, 16], 16, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));
    }
}
