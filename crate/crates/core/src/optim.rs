//! Adam, the warmup + cosine learning-rate schedule, and global-norm clipping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update at learning rate `lr` (the schedule's value for this step).
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters and {} moment slots",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (((t, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let data = t.data_mut();
            if g.len() != data.len() {
                return Err(Error::Shape(format!("gradient of {} values for {} parameters", g.len(), data.len())));
            }
            for i in 0..data.len() {
                let gi = g[i] + c.weight_decay * data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (libm::sqrt(vh) + c.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max`, then cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// Warmup covering `fraction` of the run (at least one step when the run has any).
    pub fn with_warmup_fraction(lr_max: f64, total_steps: u64, fraction: f64) -> Self {
        let w = libm::ceil(total_steps as f64 * fraction) as u64;
        Self { lr_max, warmup_steps: w.max(1).min(total_steps), total_steps }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step < w {
            return self.lr_max * (step + 1) as f64 / w as f64;
        }
        if step >= t {
            return 0.0;
        }
        let progress = (step - w) as f64 / (t - w) as f64;
        0.5 * self.lr_max * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule { lr_max: 1e-3, warmup_steps: 10, total_steps: 100 };
        assert!((s.lr(0) - 1e-4).abs() < 1e-18);
        assert_eq!(s.lr(10), 1e-3);
        assert_eq!(s.lr(100), 0.0);
        for t in 10..100 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
