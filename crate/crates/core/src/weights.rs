use std::collections::BTreeMap;

use crate::tensor::{Element, Tensor};

/// Named parameter tensors, keyed `<layer>.weight` / `<layer>.bias`.
///
/// Iteration order is lexicographic, which makes serialization deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore<T: Element = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> WeightStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Inserts a new entry. Returns `false` (and leaves the store untouched)
    /// when the name is already taken.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> bool {
        use std::collections::btree_map::Entry;
        match self.entries.entry(name.into()) {
            Entry::Occupied(_) => false,
            Entry::Vacant(v) => {
                v.insert(t);
                true
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalars held.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> WeightStore<U> {
        WeightStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Sets every scalar to zero.
    pub fn zero_all(&mut self) {
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Zeroes the entries whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, t) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}
