//! Named parameter storage.
//!
//! Model and gate tensors live in one flat [`ParamSet`]; structs that use
//! them hold [`ParamIx`] handles. Keeping parameters indexable makes the
//! leaf-binding step of each training iteration and checkpoint IO trivial.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamIx(pub usize);

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamIx {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamIx(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, ix: ParamIx) -> &Tensor {
        &self.tensors[ix.0]
    }

    pub fn get_mut(&mut self, ix: ParamIx) -> &mut Tensor {
        &mut self.tensors[ix.0]
    }

    pub fn name(&self, ix: ParamIx) -> &str {
        &self.names[ix.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamIx> {
        self.names.iter().position(|n| n == name).map(ParamIx)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamIx, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamIx(i), n.as_str(), t))
    }

    /// Total elements across all tensors (diagnostics only).
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}
