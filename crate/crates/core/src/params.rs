use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Insertion-ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        std: f64,
        rng: &mut R,
    ) {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, Tensor::new(dims.to_vec(), data).expect("dims"));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::ParamMismatch(format!("missing tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a gradient-receiving leaf.
    pub fn bind<'a>(&'a self, tape: &Tape) -> Bound<'a> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
            index: &self.index,
        }
    }

    /// Registers every tensor as a constant leaf.
    pub fn bind_constants<'a>(&'a self, tape: &Tape) -> Bound<'a> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t)).collect(),
            index: &self.index,
        }
    }

    /// Names `vars` (aligned with this store's order) for lookup.
    pub fn bind_vars<'a>(&'a self, vars: &[Var]) -> Bound<'a> {
        assert_eq!(vars.len(), self.len(), "one var per tensor");
        Bound {
            vars: vars.to_vec(),
            index: &self.index,
        }
    }
}

/// Store tensors bound to leaves of one tape.
pub struct Bound<'a> {
    vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::ParamMismatch(format!("missing tensor {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order, zeros for tensors the loss ignores.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}
