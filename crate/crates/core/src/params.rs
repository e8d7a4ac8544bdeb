//! Named parameter storage with frozen/trainable tags.
//!
//! Values are kept in 64-bit master copies regardless of the precision a graph
//! computes in; graphs cast on load. Tags are fixed at insertion time.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Frozen,
    Trainable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor<f64>,
    pub tag: Tag,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    entries: BTreeMap<String, Param>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Re-inserting an existing name is an error: tags are
    /// immutable once assigned.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f64>, tag: Tag) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` already registered")));
        }
        self.entries.insert(name, Param { value, tag });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<f64>> {
        Ok(&self.get(name)?.value)
    }

    /// Mutable access to a trainable parameter's values. Frozen parameters
    /// are never handed out mutably.
    pub fn trainable_mut(&mut self, name: &str) -> Result<&mut Tensor<f64>> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        match p.tag {
            Tag::Trainable => Ok(&mut p.value),
            Tag::Frozen => Err(Error::FrozenParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self, tag: Tag) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.tag == tag)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self, tag: Tag) -> usize {
        self.entries.values().filter(|p| p.tag == tag).map(|p| p.value.len()).sum()
    }

    /// Consumes the registry and returns a copy with every entry frozen.
    pub fn into_frozen(self) -> Self {
        let entries = self
            .entries
            .into_iter()
            .map(|(k, p)| (k, Param { value: p.value, tag: Tag::Frozen }))
            .collect();
        ParamRegistry { entries }
    }

    /// Merges another registry into this one; names must not collide.
    pub fn extend(&mut self, other: ParamRegistry) -> Result<()> {
        for (k, p) in other.entries {
            self.insert(k, p.value, p.tag)?;
        }
        Ok(())
    }

    /// SHA-256 over names, tags, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8, matches!(p.tag, Tag::Trainable) as u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
