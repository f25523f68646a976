use std::collections::btree_map;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Prefix for learned step-size tensors.
pub const QSPEC_PREFIX: &str = "qspec/";
/// Prefix for metadata tensors in checkpoints.
pub const META_PREFIX: &str = "meta/";

/// Named tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor<T>> {
        self.tensors.iter()
    }

    /// Names excluding metadata entries.
    pub fn param_names(&self) -> BTreeSet<String> {
        self.names()
            .filter(|n| !n.starts_with(META_PREFIX))
            .map(str::to_owned)
            .collect()
    }

    /// Moves the named tensors into a new store.
    pub fn split_off(&mut self, names: &BTreeSet<String>) -> Self {
        let mut out = Self::new();
        for n in names {
            if let Some(t) = self.tensors.remove(n) {
                out.tensors.insert(n.clone(), t);
            }
        }
        out
    }

    pub fn merge(&mut self, other: Self) {
        self.tensors.extend(other.tensors);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Hash over names, shapes and the exact bit patterns of the named
    /// tensors. Used to audit that a parameter set was left untouched.
    pub fn fingerprint<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> u64 {
        let mut h = DefaultHasher::new();
        for n in names {
            h.write(n.as_bytes());
            if let Some(t) = self.tensors.get(n) {
                for &d in t.shape() {
                    h.write_usize(d);
                }
                for &v in t.data() {
                    h.write_u64(v.to_f64().to_bits());
                }
            }
        }
        h.finish()
    }
}

impl<T> IntoIterator for ParamStore<T> {
    type Item = (String, Tensor<T>);
    type IntoIter = btree_map::IntoIter<String, Tensor<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}
