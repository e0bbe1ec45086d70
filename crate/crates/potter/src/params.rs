//! Named parameter storage.
//!
//! Parameters live in insertion order (which model construction fixes), so
//! binding, optimizer sweeps, and serialization are all deterministic.

use std::collections::BTreeMap;

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total stored scalars across all tensors.
    pub fn num_scalars(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    /// Register every parameter on a tape, in insertion order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids: Vec<VarId> = self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let index = self.index.clone();
        BoundParams { ids, index }
    }
}

/// Tape handles for one bound `ParamSet`, addressable by name.
pub struct BoundParams {
    ids: Vec<VarId>,
    index: BTreeMap<String, usize>,
}

impl BoundParams {
    /// Handle for a parameter that must exist; model wiring bugs panic here.
    pub fn id(&self, name: &str) -> VarId {
        match self.index.get(name) {
            Some(&i) => self.ids[i],
            None => panic!("parameter {name:?} is not bound"),
        }
    }

    pub fn id_at(&self, i: usize) -> VarId {
        self.ids[i]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_preserves_order() {
        let mut ps = ParamSet::new();
        ps.insert("b", Tensor::zeros(&[2])).unwrap();
        ps.insert("a", Tensor::zeros(&[3])).unwrap();
        assert!(ps.insert("b", Tensor::zeros(&[1])).is_err());
        let names: Vec<&str> = ps.names().collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(ps.num_scalars(), 5);
    }

    #[test]
    fn bind_assigns_handles_by_name() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::scalar(1.0)).unwrap();
        ps.insert("y", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        assert_eq!(tape.value(bound.id("y")).item(), 2.0);
        assert_eq!(bound.len(), 2);
    }
}
