use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::{Matrix, Scalar};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Matrix<T>,
    /// Whether decoupled weight decay applies (matrices yes; biases, norms
    /// no).
    pub decay: bool,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: String, value: Matrix<T>, decay: bool) -> usize {
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, decay });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Matrix<T> {
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Matrix<T> {
        &mut self.entries[idx].value
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<T> {
        &self.entries[idx]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix<T>> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}
