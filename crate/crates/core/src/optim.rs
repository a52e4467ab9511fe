//! AdamW with decoupled weight decay, and the warm-up plus cosine
//! warm-restart learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub restart_period: usize,
    pub restart_mult: usize,
    pub min_lr: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 1000,
            total_steps: 2000,
            batch_size: 4,
            seed: 0,
            restart_period: 1000,
            restart_mult: 2,
            min_lr: 0.0,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    /// Step and batch counts of the full-scale recipe.
    pub fn paper_scale() -> Self {
        Self {
            total_steps: 20_000,
            batch_size: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 || self.restart_period == 0 || self.restart_mult == 0 {
            return fail("batch_size, restart_period and restart_mult must be positive".into());
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 || self.min_lr < 0.0 || self.min_lr > self.lr {
            return fail("weight_decay, adam_eps or min_lr out of range".into());
        }
        if self.clip_norm < 0.0 {
            return fail(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        Ok(())
    }
}

/// Linear ramp from 0 over the warm-up, then cosine annealing that restarts
/// with periods `T0, T0 * mult, T0 * mult^2, ...`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let mut t = step - cfg.warmup_steps;
    let mut period = cfg.restart_period;
    while t >= period {
        t -= period;
        period *= cfg.restart_mult;
    }
    let cos = (std::f64::consts::PI * t as f64 / period as f64).cos();
    cfg.min_lr + (cfg.lr - cfg.min_lr) * (1.0 + cos) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moments per parameter, plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub step: usize,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: HashMap::new(),
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, p)| p.tensor.grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-6));
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

impl AdamW {
    /// One update of every parameter holding a gradient:
    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    ///
    /// `step` is only used in the error for non-finite gradients; nothing is
    /// modified in that case.
    pub fn step<T: Scalar>(
        &self,
        params: &mut ParamSet<T>,
        state: &mut AdamState<T>,
        lr: f64,
        step: usize,
    ) -> Result<()> {
        for (_, p) in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        step,
                        param: p.name.clone(),
                    });
                }
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr_t = T::lit(lr);
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let eps = T::lit(self.eps);
        let one = T::one();
        for (id, p) in params.iter_mut() {
            let Some(g) = p.tensor.grad().map(<[T]>::to_vec) else { continue };
            let (m, v) = state
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((w, gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * *gi;
                *vi = b2 * *vi + (one - b2) * *gi * *gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
