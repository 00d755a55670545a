//! Named tensor collections.
//!
//! A [`ParamSet`] is the unit the optimizer steps, the checkpoint format
//! serializes, and the gradient checker perturbs. Iteration order is
//! insertion order, which is fixed by the model builders, so every consumer
//! (checkpoint writer included) sees the same deterministic sequence.

use std::collections::HashMap;

use crate::tape::{NodeId, Tape};
use crate::tensor::{Array, Scalar};

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Array<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Panics on duplicate names: parameter naming is static in this crate
    /// and a collision is a bug, not input-dependent.
    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<T>)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total element count across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, arr) in self.iter() {
            out.insert(name, arr.cast());
        }
        out
    }

    /// Same names and shapes, all zeros. Optimizer moment buffers start here.
    pub fn zeros_like(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, arr) in self.iter() {
            out.insert(name, Array::zeros(arr.shape().to_vec()));
        }
        out
    }

    /// Appends every entry of `other` (names must not collide).
    pub fn extend(&mut self, other: ParamSet<T>) {
        for (name, arr) in other.entries {
            self.insert(name, arr);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.all_finite())
    }

    /// Global L2 norm over all elements (used for gradient clipping).
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for (_, arr) in self.iter() {
            for &v in arr.data() {
                let x = v.as_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }
}

/// Parameters registered on a tape as differentiable leaves, addressable by
/// their checkpoint names.
pub struct TapeBinding {
    names: Vec<String>,
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl TapeBinding {
    /// Registers every tensor of `params` on `tape` in insertion order.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet<T>) -> Self {
        let mut names = Vec::with_capacity(params.len());
        let mut ids = Vec::with_capacity(params.len());
        let mut index = HashMap::new();
        for (name, arr) in params.iter() {
            index.insert(name.to_string(), names.len());
            names.push(name.to_string());
            ids.push(tape.param(arr.clone()));
        }
        TapeBinding { names, ids, index }
    }

    /// Panics if the name is absent; model code only asks for names it
    /// created, and checkpoints are shape-validated before binding.
    pub fn id(&self, name: &str) -> NodeId {
        match self.index.get(name) {
            Some(&i) => self.ids[i],
            None => panic!("parameter {name:?} not bound on this tape"),
        }
    }

    /// Collects gradients back into a ParamSet in binding order. Parameters
    /// the loss never touched come back as zeros.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, &id) in self.names.iter().zip(&self.ids) {
            let grad = match tape.grad(id) {
                Some(g) => g.clone(),
                None => Array::zeros(tape.value(id).shape().to_vec()),
            };
            out.insert(name.clone(), grad);
        }
        out
    }
}
