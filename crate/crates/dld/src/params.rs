//! Named parameter arrays and their per-graph bindings.
//!
//! A [`ParamStore`] owns the canonical values. Building a forward graph binds
//! every parameter once, either as a gradient-accumulating leaf (training) or
//! as a constant (frozen models, evaluation); the optimizer afterwards reads
//! leaf gradients in store order.

use crate::error::{Error, Result};
use crate::tensor::{Array, Elem, Tensor};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct ParamEntry<E: Elem = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<E>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Elem = f32> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, array: Array<E>) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), shape: array.shape, data: array.data });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<E>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn array(&self, name: &str) -> Result<Array<E>> {
        let e = self.get(name)?;
        Ok(Array { shape: e.shape.clone(), data: e.data.clone() })
    }

    /// Replace the values of parameter `i`, keeping its shape.
    pub fn set_data(&mut self, i: usize, data: Vec<E>) {
        assert_eq!(data.len(), self.entries[i].data.len());
        self.entries[i].data = Arc::new(data);
    }

    /// Deep conversion, used to instantiate the f64 shadow of a model.
    pub fn convert<F: Elem>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(&e.name, Array::new(e.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(), e.shape.clone()));
        }
        out
    }

    /// Bind every parameter into the current graph.
    pub fn bind(&self, trainable: bool) -> Binding<E> {
        let leaves = self
            .entries
            .iter()
            .map(|e| {
                let t = Tensor::from_parts(e.shape.clone(), e.data.clone(), trainable, None);
                t
            })
            .collect();
        Binding { leaves, index: self.index.clone() }
    }
}

/// One graph's view of a [`ParamStore`].
pub struct Binding<E: Elem = f32> {
    leaves: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Elem> Binding<E> {
    pub fn get(&self, name: &str) -> Tensor<E> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.leaves[i].clone()
    }

    pub fn leaves(&self) -> &[Tensor<E>] {
        &self.leaves
    }

    /// Accumulated gradients in store order (zeros where a leaf was never
    /// reached by backward).
    pub fn grads(&self) -> Vec<Vec<E>> {
        self.leaves.iter().map(|l| l.grad_or_zeros()).collect()
    }

    /// True if every accumulated gradient entry is exactly zero or absent.
    pub fn grads_all_zero(&self) -> bool {
        self.leaves.iter().all(|l| match l.grad() {
            None => true,
            Some(g) => g.iter().all(|&v| v == E::ZERO),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_collects_gradients_in_store_order() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("a", Array::new(vec![1.0, 2.0], vec![2]));
        store.insert("b", Array::new(vec![3.0], vec![1]));
        let bind = store.bind(true);
        let loss = bind.get("a").sum_all().add(&bind.get("b").sum_all()).unwrap();
        loss.backward().unwrap();
        let grads = bind.grads();
        assert_eq!(grads[0], vec![1.0, 1.0]);
        assert_eq!(grads[1], vec![1.0]);
    }

    #[test]
    fn frozen_binding_accumulates_nothing() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("w", Array::new(vec![2.0], vec![1]));
        let bind = store.bind(false);
        let loss = bind.get("w").scale(3.0).sum_all();
        loss.backward().unwrap();
        assert!(bind.grads_all_zero());
    }
}
