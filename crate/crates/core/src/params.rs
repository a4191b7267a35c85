use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered `name -> tensor` map of model parameters.
///
/// Insertion order is the iteration order; two models built from the same
/// configuration enumerate their parameters identically.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

/// Gradients keyed by parameter name, in tape registration order.
pub type Gradients = IndexMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Removes an entry, keeping the order of the rest.
    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// The trainable subset, in order.
    pub fn trainable(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    /// Overwrites tensors by name from `values`; every name must already exist
    /// with the same shape and dtype.
    pub fn assign(&mut self, values: &ParamSet) -> Result<()> {
        for (name, src) in values.iter() {
            let dst = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
            dst.tensor.same_layout(&src.tensor, "assign")?;
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }

    /// True when both sets have the same names, in the same order, with
    /// matching shapes and dtypes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb && a.tensor.shape() == b.tensor.shape() && a.tensor.dtype() == b.tensor.dtype()
            })
    }

    /// Bitwise equality of names, order and values (trainable flags ignored).
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.tensor.bit_eq(&b.tensor))
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for p in self.entries.values_mut() {
            p.trainable = flag;
        }
    }

    /// All values concatenated in iteration order, as f64.
    pub fn flatten_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in self.entries.values() {
            out.extend(p.tensor.to_f64_vec());
        }
        out
    }

    /// Largest absolute difference over all entries of two same-structure sets.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        if !self.same_structure(other) {
            return Err(Error::invalid("parameter sets differ in structure"));
        }
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.iter().zip(other.iter()) {
            worst = worst.max(a.tensor.max_abs_diff(&b.tensor)?);
        }
        Ok(worst)
    }
}
