//! Named parameter storage shared by models and the optimizer.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Keep only parameters whose name satisfies `keep`. Ids are renumbered.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (_, n, v) in self.iter() {
            if keep(n) {
                out.add(n, v.clone());
            }
        }
        out
    }

    /// Copy values from `other` for every name present in both stores.
    /// Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize, String> {
        let mut copied = 0;
        for i in 0..self.names.len() {
            if let Some(j) = other.find(&self.names[i]) {
                let src = other.value(j);
                if src.shape() != self.values[i].shape() {
                    return Err(format!(
                        "parameter {} has shape {:?}, checkpoint has {:?}",
                        self.names[i],
                        self.values[i].shape(),
                        src.shape()
                    ));
                }
                self.values[i] = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}
