use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::learning::Tensor;

/// Named parameter store, ordered by name so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// All parameters whose name starts with `prefix`.
    pub fn subtree(&self, prefix: &str) -> Params {
        Params {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Insert every entry of `other`, replacing existing names.
    pub fn extend(&mut self, other: Params) {
        self.map.extend(other.map);
    }

    pub fn round_to_f32(&mut self) {
        for t in self.map.values_mut() {
            t.round_to_f32();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &Params) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// Names whose values differ bitwise between `self` and `other`.
    pub fn diff_names(&self, other: &Params) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in &self.map {
            match other.map.get(k) {
                Some(w) if v.bit_eq(w) => {}
                _ => out.push(k.clone()),
            }
        }
        for k in other.map.keys() {
            if !self.map.contains_key(k) {
                out.push(k.clone());
            }
        }
        out
    }
}

impl FromIterator<(String, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Params {
            map: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for Params {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.map.into_iter()
    }
}
