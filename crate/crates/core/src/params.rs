//! Named parameter storage with a frozen/trainable split.

use std::ops::Index;
use std::rc::Rc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Rc<Tensor>,
    pub trainable: bool,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Every parameter of a store recorded as a leaf on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value: Rc::new(value), trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = Rc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.params[id.0].trainable).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.params[id.0].trainable).collect()
    }

    pub fn count(&self, trainable: bool) -> usize {
        self.params.iter().filter(|p| p.trainable == trainable).map(|p| p.value.numel()).sum()
    }

    /// Records all parameters on `tape`; trainable ones require gradients.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf_shared(Rc::clone(&p.value), p.trainable))
            .collect();
        Bound { vars }
    }

    /// Records all parameters on `tape` as constants, for inference-only passes.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self.params.iter().map(|p| tape.leaf_shared(Rc::clone(&p.value), false)).collect();
        Bound { vars }
    }

    /// SHA-256 over name, shape and little-endian data of every frozen parameter.
    pub fn frozen_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
