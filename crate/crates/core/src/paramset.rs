//! Named tensor collections: the in-memory form of a checkpoint.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered map of parameter name to tensor plus string metadata.
/// Iteration order is always lexicographic by name, which is what makes
/// checkpoint serialization and every downstream traversal deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    /// Inserting an existing name replaces its tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all tensors.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Same names, and per name the same shape and dtype. Metadata is not
    /// part of compatibility: a delta and a checkpoint may be combined.
    pub fn assert_compatible(&self, other: &ParamSet) -> Result<()> {
        self.assert_same_geometry(other)?;
        for ((na, ta), (_, tb)) in self.entries.iter().zip(other.entries.iter()) {
            if ta.dtype() != tb.dtype() {
                return Err(Error::DtypeMismatch {
                    name: na.clone(),
                    expected: ta.dtype().tag(),
                    found: tb.dtype().tag(),
                });
            }
        }
        Ok(())
    }

    /// Same names and shapes, dtypes free to differ. Deltas carry wider
    /// entries than the checkpoints they connect, so cross-dtype pairs
    /// are legitimate wherever the arithmetic widens anyway.
    pub fn assert_same_geometry(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Incompatible(format!(
                "{} tensors vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb {
                return Err(Error::Incompatible(format!(
                    "name {na:?} on one side, {nb:?} on the other"
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch {
                    name: na.clone(),
                    left: ta.shape().to_vec(),
                    right: tb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Bit-level equality of all tensors; metadata is ignored.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, tensor) in iter {
            ps.insert(name, tensor);
        }
        ps
    }
}
