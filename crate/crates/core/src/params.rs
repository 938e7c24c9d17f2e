use std::collections::BTreeMap;

use crate::tensor::{Result, Tensor, TensorError};

/// Named parameters, iterated in sorted-name order.
///
/// Each entry is stored once no matter how many places in the network use
/// it; weight sharing happens by looking the same name up repeatedly.
/// Frozen entries (`requires_grad == false`) are carried along for
/// checkpointing and counting but are never updated.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let t = Tensor::parameter(shape, values)?;
        self.insert_tensor(name.into(), t)
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let t = Tensor::new(shape, values)?;
        self.insert_tensor(name.into(), t)
    }

    fn insert_tensor(&mut self, name: String, t: Tensor) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(TensorError::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces the values of an existing entry with a fresh leaf of the same
    /// shape and trainability. Any accumulated gradient is dropped.
    pub fn replace_values(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let old = self.get(name)?;
        let t = if old.requires_grad() {
            Tensor::parameter(old.shape(), values)?
        } else {
            Tensor::new(old.shape(), values)?
        };
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
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

    /// Total scalar count across all entries, frozen ones included.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.values().for_each(Tensor::zero_grad);
    }

    /// Copy backed by new leaves: same values, no gradients, no links to any
    /// graph built from `self`.
    /// Copy whose entries are all constants, for passes that need no
    /// gradients.
    pub fn detached(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|(k, t)| (k.clone(), t.detach())).collect(),
        }
    }

    pub fn fresh_copy(&self) -> Self {
        let mut out = Self::new();
        for (name, t) in &self.entries {
            let leaf = if t.requires_grad() {
                Tensor::parameter(t.shape(), t.values().to_vec())
            } else {
                Tensor::new(t.shape(), t.values().to_vec())
            }
            .expect("existing shape is valid");
            out.entries.insert(name.clone(), leaf);
        }
        out
    }

    /// True when names, shapes, trainability and every value bit agree.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb && a.requires_grad() == b.requires_grad() && a.bitwise_eq(b)
            })
    }
}
