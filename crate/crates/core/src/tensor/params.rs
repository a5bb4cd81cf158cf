//! Named trainable parameters held outside any single autodiff tape.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// Stable handle into a [`ParamSet`]; ids are assigned in insertion order,
/// which fixes the gradient-accumulation order and keeps runs bit-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
    pub trainable: bool,
}

/// Ordered collection of named parameters plus accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.insert(name, value, true)
    }

    /// Register a non-trainable entry (kept for inspection; the optimizer
    /// skips it and its gradient must stay identically zero).
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        let grad = vec![S::zero(); value.numel()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad, trainable });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| CoreError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in id order (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Add an externally accumulated gradient buffer (same layout as
    /// [`flat_grads`](Self::flat_grads)) into the stored gradients.
    pub fn accumulate_flat(&mut self, flat: &[S]) {
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            for (g, &f) in p.grad.iter_mut().zip(&flat[offset..offset + n]) {
                *g = *g + f;
            }
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat gradient length mismatch");
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Concatenated gradient snapshot in id order.
    pub fn flat_grads(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.total_values());
        for p in &self.params {
            out.extend_from_slice(&p.grad);
        }
        out
    }
}
