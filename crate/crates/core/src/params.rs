//! Flat named parameter storage shared by every model component.
//!
//! Components hold [`ParamId`]s; a forward pass binds the whole store onto a
//! tape with [`ParamStore::bind`], choosing per parameter whether it is a
//! differentiable leaf or a constant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};

pub type ParamId = usize;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.frozen.push(false);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.values[id] = value;
    }

    pub fn freeze(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn ids(&self) -> std::ops::Range<ParamId> {
        0..self.values.len()
    }

    /// Records every parameter on `tape`: a leaf when `trainable(id)` holds
    /// and the parameter is not frozen, a constant otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(ParamId) -> bool) -> Bound<'t> {
        let mut leaves = vec![false; self.values.len()];
        let vars = self
            .values
            .iter()
            .enumerate()
            .map(|(id, v)| {
                if trainable(id) && !self.frozen[id] {
                    leaves[id] = true;
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { tape, vars, leaves }
    }
}

/// A [`ParamStore`] recorded on a tape.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
    leaves: Vec<bool>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id]
    }

    pub fn is_leaf(&self, id: ParamId) -> bool {
        self.leaves[id]
    }

    pub fn leaf_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.leaves.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i)
    }
}
