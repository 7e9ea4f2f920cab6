use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Real, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle of one named array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays in insertion order.
///
/// Entries marked non-trainable (frozen weights, running statistics) are
/// bound into graphs as constants and never receive gradients.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    /// Panics on duplicate names: parameter layout is fixed at construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Copy values from a store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), String> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = &self.names[id.0];
            let src = other.find(name).ok_or_else(|| format!("missing parameter {name}"))?;
            let v = other.get(src);
            if v.shape() != self.values[id.0].shape() {
                return Err(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    v.shape(),
                    self.values[id.0].shape()
                ));
            }
            self.values[id.0] = v.clone();
        }
        Ok(())
    }
}
