//! Named parameter storage shared by both models.
//!
//! Parameters live in insertion order; that order is the contract for the
//! optimizer state, checkpoint blocks, and flattened gradient-check vectors.

use crate::error::{EagError, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter; returns its stable handle.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Register every parameter as a tape leaf, in store order.
    pub fn to_tape(&self, tape: &Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Total scalar parameter count.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Concatenate all parameters into one vector (store order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite all parameters from a flat vector (store order).
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(EagError::shape(format!(
                "flat parameter vector has {} values, store holds {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Copy parameter values from another store with identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names, "parameter store layouts differ");
        for (dst, src) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }

    /// Look up a parameter index by name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}
