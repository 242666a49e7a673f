use std::collections::HashMap;

use super::{NdTensor, Scalar, Tape, Var};
use crate::{Error, Result};

/// Ordered, named parameter store. Entry order is insertion order and is the
/// canonical order for bindings, optimizer state and checkpoints.
#[derive(Debug, Clone)]
pub struct Params<T: Scalar> {
    entries: Vec<(String, NdTensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: NdTensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> &NdTensor<T> {
        let idx = self.index[name];
        &self.entries[idx].1
    }

    pub fn try_get(&self, name: &str) -> Option<&NdTensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut NdTensor<T> {
        let idx = self.index[name];
        &mut self.entries[idx].1
    }

    pub fn set(&mut self, name: &str, tensor: NdTensor<T>) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                if self.entries[i].1.shape() != tensor.shape() {
                    return Err(Error::shape(
                        "Params::set",
                        format!(
                            "`{name}` has shape {:?}, got {:?}",
                            self.entries[i].1.shape(),
                            tensor.shape()
                        ),
                    ));
                }
                self.entries[i].1 = tensor;
                Ok(())
            }
            None => Err(Error::config(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdTensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Lift every parameter onto `tape` as a trainable leaf, in entry order.
    pub fn bind<'p>(&'p self, tape: &mut Tape<T>) -> ParamBinding<'p, T> {
        let vars = self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect();
        ParamBinding { params: self, vars }
    }

    /// Lift every parameter as a frozen (non-differentiable) leaf.
    pub fn bind_frozen<'p>(&'p self, tape: &mut Tape<T>) -> ParamBinding<'p, T> {
        let vars = self.entries.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        ParamBinding { params: self, vars }
    }
}

/// Per-tape handle mapping parameter names to their leaf [`Var`]s.
pub struct ParamBinding<'p, T: Scalar> {
    params: &'p Params<T>,
    vars: Vec<Var>,
}

impl<'p, T: Scalar> ParamBinding<'p, T> {
    /// Rebuild a binding from externally created leaves (gradient checks).
    pub fn from_vars(params: &'p Params<T>, vars: Vec<Var>) -> Self {
        assert_eq!(params.len(), vars.len(), "binding arity mismatch");
        ParamBinding { params, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.params.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unbound parameter `{name}`"),
        }
    }

    /// Extract accumulated leaf gradients in entry order (after `backward`).
    pub fn grads(&self, tape: &Tape<T>) -> Vec<Option<Vec<T>>> {
        self.vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_stable() {
        let mut p = Params::<f32>::new();
        p.insert("b", NdTensor::zeros(&[2])).unwrap();
        p.insert("a", NdTensor::zeros(&[3])).unwrap();
        let names: Vec<_> = p.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.scalar_count(), 5);
        assert!(p.insert("a", NdTensor::zeros(&[1])).is_err());
    }
}
