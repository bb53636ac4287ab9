use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Named trainable parameters plus non-trainable buffers (running statistics).
///
/// Paths are `/`-separated, e.g. `generator/enc0/weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) {
        self.params.insert(path.into(), value);
    }

    pub fn insert_buffer(&mut self, path: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.params.get(path).ok_or_else(|| Error::MissingKey {
            key: path.to_string(),
            source_name: "parameter store".into(),
        })
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(path)
    }

    pub fn buffer(&self, path: &str) -> Result<&Tensor<T>> {
        self.buffers.get(path).ok_or_else(|| Error::MissingKey {
            key: path.to_string(),
            source_name: "buffer store".into(),
        })
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn param_paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Absorb all entries of `other`, replacing duplicates.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    /// Entries whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<T>)>) {
        for (path, value) in updates {
            self.buffers.insert(path, value);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        fn same<T: Real>(a: &BTreeMap<String, Tensor<T>>, b: &BTreeMap<String, Tensor<T>>) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|((ka, va), (kb, vb))| ka == kb && va.bitwise_eq(vb))
        }
        same(&self.params, &other.params) && same(&self.buffers, &other.buffers)
    }
}
