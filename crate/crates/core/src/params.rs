//! Named parameter traversal shared by models, blocks and the optimizer.
//!
//! Names are dotted paths (`stage3.dcb0.mldc.branch_a.weight`). Learnable
//! tensors and BN running statistics (buffers) are visited in the same,
//! stable order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    /// Running statistics: serialized, but neither counted nor optimized.
    Buffer,
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Parameterized<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind));
}

/// Ordered `(name, tensor)` list of the learnable parameters.
pub fn learnable<T: Clone, P: Parameterized<T> + ?Sized>(p: &P) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    p.visit_params("", &mut |name, t, kind| {
        if kind == ParamKind::Learnable {
            out.push((name.to_string(), t.clone()));
        }
    });
    out
}

/// Tensors keyed by parameter name; used for gradients and ad-hoc parameter
/// sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors<T>(BTreeMap<String, Tensor<T>>);

impl<T: Scalar> NamedTensors<T> {
    pub fn new() -> Self {
        NamedTensors(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.0.insert(name.into(), t);
    }

    /// Adds `t` into the entry for `name`, creating it when absent.
    pub fn accumulate(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        match self.0.get_mut(name) {
            Some(existing) => existing.add_assign(&t),
            None => {
                self.0.insert(name.to_string(), t);
                Ok(())
            }
        }
    }

    /// Accumulates an op's local gradients under `prefix`.
    pub fn absorb(&mut self, prefix: &str, local: BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, t) in local {
            self.accumulate(&join(prefix, &name), t)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.0.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.0.iter()
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.0
            .get(name)
            .ok_or_else(|| Error::InvalidState(format!("no gradient for parameter {name}")))
    }
}

impl<T: Scalar> Parameterized<T> for NamedTensors<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        for (name, t) in &self.0 {
            f(&join(prefix, name), t, ParamKind::Learnable);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        for (name, t) in &mut self.0 {
            f(&join(prefix, name), t, ParamKind::Learnable);
        }
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for NamedTensors<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        NamedTensors(iter.into_iter().collect())
    }
}
