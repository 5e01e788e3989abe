//! Named parameter collections and their binding onto a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered `name -> tensor` map. Order is insertion order and is part of the
/// checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(arg_err!("duplicate parameter name {name}"));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
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

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.lookup.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Checks that `other` has exactly the same names (in order) and shapes.
    pub fn ensure_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(dim_err!(
                "parameter names differ ({} vs {} entries)",
                self.len(),
                other.len()
            ));
        }
        for ((name, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(dim_err!(
                    "parameter {name}: shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                ));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound {
            vars,
            lookup: self.lookup.clone(),
        })
    }
}

/// Graph handles for a bound [`ParamSet`], aligned with its order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    lookup: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.lookup
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| arg_err!("unknown parameter {name}"))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}
