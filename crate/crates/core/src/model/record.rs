//! Captured attention weights: per layer, per head, post-softmax.

use crate::scalar::Scalar;

use super::segmap::ModalitySegmentMap;

/// One layer's post-softmax attention, flat `[head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention<S> {
    pub heads: usize,
    pub len: usize,
    weights: Vec<S>,
}

impl<S: Scalar> LayerAttention<S> {
    pub fn new(heads: usize, len: usize, weights: Vec<S>) -> Self {
        assert_eq!(weights.len(), heads * len * len);
        LayerAttention { heads, len, weights }
    }

    /// Exactly uniform attention (every row 1/len); analysis calibration.
    pub fn uniform(heads: usize, len: usize) -> Self {
        let v = S::one() / S::from_f64_lossy(len as f64);
        LayerAttention { heads, len, weights: vec![v; heads * len * len] }
    }

    #[inline]
    pub fn at(&self, head: usize, query: usize, key: usize) -> S {
        self.weights[(head * self.len + query) * self.len + key]
    }

    pub fn row(&self, head: usize, query: usize) -> &[S] {
        let base = (head * self.len + query) * self.len;
        &self.weights[base..base + self.len]
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [S] {
        &mut self.weights
    }

    /// Max row-sum deviation from 1 across heads and queries.
    pub fn row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for h in 0..self.heads {
            for q in 0..self.len {
                let sum: S = self.row(h, q).iter().cloned().sum();
                worst = worst.max((sum.to_f64_lossy() - 1.0).abs());
            }
        }
        worst
    }

    pub fn to_f32(&self) -> LayerAttention<f32> {
        LayerAttention {
            heads: self.heads,
            len: self.len,
            weights: self.weights.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }
}

/// Full capture for one example: every layer's weights plus the segment
/// map that interprets the sequence positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<S> {
    pub example_id: u64,
    pub segmap: ModalitySegmentMap,
    pub layers: Vec<LayerAttention<S>>,
}

impl<S: Scalar> AttentionRecord<S> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Mean attention tensor over layers (used for "all layer" grounding).
    pub fn layer_average(&self) -> LayerAttention<S> {
        let first = &self.layers[0];
        let mut acc = vec![S::zero(); first.weights().len()];
        for layer in &self.layers {
            for (a, &w) in acc.iter_mut().zip(layer.weights()) {
                *a = *a + w;
            }
        }
        let inv = S::one() / S::from_f64_lossy(self.layers.len() as f64);
        for a in acc.iter_mut() {
            *a = *a * inv;
        }
        LayerAttention::new(first.heads, first.len, acc)
    }
}
