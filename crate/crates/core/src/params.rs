//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Named, ordered collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::Structural(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries.get_mut(name).ok_or_else(|| Error::Structural(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Same names with the same shapes.
    pub fn check_congruent(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Structural(format!(
                "parameter stores hold {} and {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::Structural(format!("parameter names differ: `{na}` vs `{nb}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Structural(format!(
                    "parameter `{na}` has shapes {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.entries.values_mut().for_each(|t| t.set_requires_grad(on));
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// True when no entry holds a gradient buffer with a non-zero value.
    pub fn grads_are_zero(&self) -> bool {
        self.entries.values().all(|t| t.grad().is_none_or(|g| g.iter().all(|&x| x == 0.0)))
    }

    /// Records every entry as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.entries.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect() }
    }

    /// Folds the gradients of a backward pass into the entries' buffers.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (name, &var) in &bound.vars {
            if let Some(g) = grads.get(var) {
                self.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    /// Euclidean distance between two congruent stores, over all scalars.
    pub fn distance(&self, other: &ParamStore) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt())
    }
}

/// Tape variables for every entry of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: Vec<(String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Structural(format!("parameter `{name}` is not bound")))
    }
}

/// Uniform samples in `±bound`.
pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
