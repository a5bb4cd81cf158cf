//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::ParamSet;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent ramping linearly from 0 to peak.
    pub warmup_fraction: f64,
    pub total_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        AdamWConfig {
            learning_rate,
            beta1: 0.9,
            // 0.95 adapts fast enough for runs of a few hundred steps;
            // 0.999 is visibly too sluggish at this scale.
            beta2: 0.95,
            epsilon: 1e-8,
            weight_decay,
            warmup_fraction,
            total_steps,
            clip_norm: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(CoreError::Config(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if self.learning_rate <= 0.0 || self.total_steps == 0 {
            return Err(CoreError::Config("learning rate and total steps must be positive".into()));
        }
        Ok(())
    }
}

/// Schedule factor in [0,1] for 1-based `step` of `total`: linear ramp over
/// the warmup steps, then linear decay hitting exactly zero at `total`.
pub fn linear_schedule(step: usize, total: usize, warmup_fraction: f64) -> f64 {
    assert!(step >= 1 && step <= total, "step {step} outside 1..={total}");
    let warmup = (warmup_fraction * total as f64).round() as usize;
    if warmup > 0 && step <= warmup {
        step as f64 / warmup as f64
    } else {
        (total - step) as f64 / (total - warmup) as f64
    }
}

/// AdamW state over one [`ParamSet`]; moments are kept per parameter in id
/// order so update order is deterministic.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: usize,
    first_moment: Vec<Vec<S>>,
    second_moment: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, params: &ParamSet<S>) -> Result<Self> {
        config.validate()?;
        let first_moment = params.iter().map(|(_, p)| vec![S::zero(); p.value.numel()]).collect();
        let second_moment = params.iter().map(|(_, p)| vec![S::zero(); p.value.numel()]).collect();
        Ok(AdamW { config, step: 0, first_moment, second_moment })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Effective learning rate for the *next* step.
    pub fn next_learning_rate(&self) -> f64 {
        let t = (self.step + 1).min(self.config.total_steps);
        self.config.learning_rate * linear_schedule(t, self.config.total_steps, self.config.warmup_fraction)
    }

    /// Apply one update using the gradients accumulated in `params`, then
    /// clear them. Aborts on any non-finite gradient, naming the parameter.
    pub fn step(&mut self, params: &mut ParamSet<S>) -> Result<()> {
        self.step += 1;
        let t = self.step.min(self.config.total_steps);
        let lr = S::from_f64_lossy(
            self.config.learning_rate
                * linear_schedule(t, self.config.total_steps, self.config.warmup_fraction),
        );
        let beta1 = S::from_f64_lossy(self.config.beta1);
        let beta2 = S::from_f64_lossy(self.config.beta2);
        let eps = S::from_f64_lossy(self.config.epsilon);
        let wd = S::from_f64_lossy(self.config.weight_decay);
        let one = S::one();
        let bias1 = one - S::from_f64_lossy(self.config.beta1.powi(self.step as i32));
        let bias2 = one - S::from_f64_lossy(self.config.beta2.powi(self.step as i32));

        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for &id in &ids {
            if !params.get(id).trainable {
                continue;
            }
            if let Some(pos) = params.get(id).grad.iter().position(|g| !g.is_finite()) {
                let name = params.get(id).name.clone();
                return Err(CoreError::Training(format!(
                    "non-finite gradient in parameter `{name}` at index {pos}"
                )));
            }
        }

        // Global-norm clipping over every trainable gradient.
        let mut scale = S::one();
        if self.config.clip_norm > 0.0 {
            let mut sq = S::zero();
            for &id in &ids {
                let p = params.get(id);
                if p.trainable {
                    sq = sq + p.grad.iter().map(|&g| g * g).sum::<S>();
                }
            }
            let norm = sq.sqrt();
            let clip = S::from_f64_lossy(self.config.clip_norm);
            if norm > clip {
                scale = clip / norm;
            }
        }

        for id in ids {
            if !params.get(id).trainable {
                continue;
            }
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let p = params.get_mut(id);
            for i in 0..p.grad.len() {
                let g = p.grad[i] * scale;
                m[i] = beta1 * m[i] + (one - beta1) * g;
                v[i] = beta2 * v[i] + (one - beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let w = p.value.data_mut();
                w[i] = w[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]);
            }
        }
        params.zero_grads();
        Ok(())
    }
}
