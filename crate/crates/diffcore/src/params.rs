use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::io;
use crate::tensor::Tensor;

/// Named parameter tensors in a stable (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across entries whose name passes `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(n, _)| filter(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Puts every parameter on the tape as a leaf. Entries for which
    /// `trainable` is false become constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> ParamVars {
        let map = self
            .entries
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.input(t)
                } else {
                    g.constant(t)
                };
                (name.clone(), v)
            })
            .collect();
        ParamVars { map }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_checkpoint(w, self.iter())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let entries = io::read_checkpoint(r)?;
        let mut store = ParamStore::new();
        for (name, t) in entries {
            if store.insert(name.clone(), t).is_some() {
                return Err(TensorError::Format(format!("duplicate entry {name}")));
            }
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every parameter that received one.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.map
            .iter()
            .filter_map(|(name, &v)| g.grad(v).map(|gr| (name.clone(), gr.to_vec())))
            .collect()
    }
}
