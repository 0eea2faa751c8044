//! Named, ordered parameter storage.
//!
//! A `ParamStore` maps string names to tensors and remembers insertion
//! order, so optimizer state, serialization, and gradient reduction all
//! walk parameters in one deterministic sequence. Updates are exclusive;
//! evaluation reads a consistent snapshot (single-writer contract).

use crate::error::{Error, Result};
use crate::Tensor;
use std::collections::HashMap;

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    /// Replace a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::LeafNotFound(name.to_string()))?;
        let old = &self.entries[i].1;
        if old.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name:?} shape {:?} cannot become {:?}",
                old.shape(),
                value.shape()
            )));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Global L2 norm over every scalar parameter.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Snapshot every parameter into a leaf-binding map for graph
    /// evaluation.
    pub fn bindings(&self) -> HashMap<String, Tensor> {
        self.entries.iter().cloned().collect()
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ParamStore({} tensors, {} scalars)",
            self.len(),
            self.scalar_count()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut p = ParamStore::new();
        p.insert("b", Tensor::zeros(&[2]));
        p.insert("a", Tensor::zeros(&[3]));
        p.insert("c", Tensor::zeros(&[1]));
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, ["b", "a", "c"]);
        assert_eq!(p.scalar_count(), 6);
    }

    #[test]
    fn set_rejects_shape_changes() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[2, 2]));
        assert!(p.set("w", Tensor::ones(&[2, 2])).is_ok());
        assert!(matches!(
            p.set("w", Tensor::zeros(&[4])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            p.set("missing", Tensor::zeros(&[1])),
            Err(Error::LeafNotFound(_))
        ));
    }

    #[test]
    fn global_norm_matches_hand_value() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(vec![2], vec![3.0, 4.0]));
        assert!((p.global_norm() - 5.0).abs() < 1e-15);
    }
}
