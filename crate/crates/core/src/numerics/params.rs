use std::collections::BTreeMap;

use rand::Rng;

use super::NumArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: NumArray,
    pub grad: NumArray,
}

/// Named learnable parameters with gradient accumulators.
///
/// Names are dotted paths such as `embedder.lstm.w_iou`. Iteration order is
/// lexicographic by name, which keeps optimizer updates and serialization
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter, resetting its gradient.
    pub fn insert(&mut self, name: impl Into<String>, value: NumArray) {
        let grad = NumArray::zeros(value.shape());
        self.entries.insert(name.into(), Param { value, grad });
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for a `[fan_in, fan_out]` weight.
    pub fn insert_uniform<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, NumArray::matrix(rows, cols, data).expect("positive extents"));
    }

    pub fn insert_filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.insert(name, NumArray::filled(&[rows, cols], v));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&NumArray> {
        self.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Result<&NumArray> {
        self.get(name).map(|p| &p.grad)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &NumArray) -> Result<()> {
        let p = self.get_mut(name)?;
        if !p.grad.same_shape(g) && p.grad.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("{name}: {:?} vs {:?}", p.grad.shape(), g.shape()),
            });
        }
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Merges `other` into `self`; names already present are replaced.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}
