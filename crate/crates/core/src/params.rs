//! Named parameter collections shared by every trainable model.
//!
//! A [`ParamSet`] is an ordered map from names to tensors. Insertion order is
//! the canonical order used by optimizers, checkpoints, and graph binding, so
//! a model built twice from the same constructor binds identically.

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::{Error, Result};

/// An ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<E: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Real> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> ParamSet<E> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    /// Append a parameter. Names must be unique within the set.
    pub fn insert(&mut self, name: &str, tensor: Tensor<E>) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Contract(format!("duplicate parameter name: {name}")));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor<E> {
        &self.tensors[index]
    }

    pub fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor<E> {
        &mut self.tensors[index]
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters across all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Convert every tensor to another element type (used to run gradient
    /// verification in 64-bit while training stays in 32-bit).
    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast::<T>()).collect(),
        }
    }

    /// Insert every parameter into `g` as a trainable leaf, in canonical
    /// order, and return the handles for later gradient lookup.
    pub fn bind(&self, g: &mut Graph<E>) -> Bound {
        self.bind_with(g, true)
    }

    /// Like [`bind`](Self::bind) but with an explicit trainability switch;
    /// frozen binding prunes all backward work for these leaves.
    pub fn bind_with(&self, g: &mut Graph<E>, trainable: bool) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { names: self.names.clone(), ids }
    }

    /// A stable content fingerprint (used by tests asserting that frozen
    /// parameters stay bit-identical through a training run).
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, t) in self.iter() {
            for b in name.as_bytes() {
                eat(*b);
            }
            for d in t.shape() {
                for b in (*d as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for v in t.data() {
                for b in (v.as_f64()).to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// Graph handles for a bound [`ParamSet`], in canonical order.
#[derive(Debug, Clone)]
pub struct Bound {
    names: Vec<String>,
    ids: Vec<NodeId>,
}

impl Bound {
    /// Assemble from explicit pieces (used when leaves are created by
    /// machinery other than [`ParamSet::bind`], e.g. the gradient checker).
    pub fn from_parts(names: Vec<String>, ids: Vec<NodeId>) -> Self {
        Self { names, ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.try_id(name)
            .unwrap_or_else(|| panic!("unknown parameter name: {name}"))
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.names.iter().position(|n| n == name).map(|i| self.ids[i])
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_count() {
        let mut p: ParamSet<f32> = ParamSet::new();
        p.insert("b", Tensor::zeros(&[3]).unwrap()).unwrap();
        p.insert("a", Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(p.param_count(), 7);
        assert!(p.insert("a", Tensor::zeros(&[1]).unwrap()).is_err());
    }

    #[test]
    fn empty_set_counts_zero() {
        let p: ParamSet<f64> = ParamSet::new();
        assert_eq!(p.param_count(), 0);
    }

    #[test]
    fn bind_roundtrip() {
        let mut p: ParamSet<f64> = ParamSet::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        assert_eq!(g.value(bound.id("w")).data(), &[1.0, 2.0]);
        assert!(bound.try_id("nope").is_none());
    }

    #[test]
    fn content_hash_tracks_values() {
        let mut p: ParamSet<f32> = ParamSet::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let h0 = p.content_hash();
        p.get_mut("w").unwrap().data_mut()[0] = 1.5;
        assert_ne!(h0, p.content_hash());
    }
}
