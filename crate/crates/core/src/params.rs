//! Named, ordered collection of learnable tensors.

use std::collections::HashMap;

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::arg(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value_at(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.values.iter().map(|v| tape.param(v.clone())).collect();
        Bound { store: self, vars }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.values.iter().map(|v| tape.constant(v.clone())).collect();
        Bound { store: self, vars }
    }
}

/// Parameters recorded on a particular tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::arg(format!("unknown parameter {name}")))
    }

    pub fn var_at(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
