//! Dense n-dimensional tensors and named parameter collections.
//!
//! Shapes are row-major with the slowest axis first. All arithmetic is f64.

use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use crate::error::{Result, VxError};

/// Dense real tensor. Immutable after construction except for the gradient
/// buffer, which the autodiff graph accumulates into.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(VxError::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(VxError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn grad_is_finite(&self) -> bool {
        match &self.grad {
            Some(g) => g.iter().all(|v| v.is_finite()),
            None => true,
        }
    }
}

static NEXT_PARAMSET_ID: AtomicU64 = AtomicU64::new(1);

/// Ordered, uniquely named collection of trainable tensors.
///
/// Iteration order is insertion order and is stable across save/load, which
/// keeps optimizer state and checkpoints aligned with their parameters.
#[derive(Debug)]
pub struct ParamSet {
    id: u64,
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            id: NEXT_PARAMSET_ID.fetch_add(1, Ordering::Relaxed),
            entries: IndexMap::new(),
        }
    }

    /// Identity token used by graphs to route gradients back to the set
    /// they were captured from.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(VxError::ShapeMismatch(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.entries.insert(name.to_string(), tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.clear_grad();
        }
    }

    /// True when every tensor's data matches `other` bit for bit.
    pub fn data_equals(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb && a.shape() == b.shape() && a.data() == b.data()
            })
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamSet {
    /// Clones contents under a fresh identity token.
    fn clone(&self) -> Self {
        ParamSet {
            id: NEXT_PARAMSET_ID.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::zeros(vec![3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn paramset_rejects_duplicates_and_keeps_order() {
        let mut ps = ParamSet::new();
        ps.insert("b", Tensor::zeros(vec![2])).unwrap();
        ps.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(ps.insert("a", Tensor::zeros(vec![2])).is_err());
        let names: Vec<_> = ps.names().collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    fn paramsets_have_distinct_ids() {
        let a = ParamSet::new();
        let b = ParamSet::new();
        assert_ne!(a.id(), b.id());
        assert_ne!(a.clone().id(), a.id());
    }
}
