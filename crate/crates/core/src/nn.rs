//! Parameterized layers shared by the encoder, experts and head.

use alloc::format;
use alloc::vec;

use crate::error::Result;
use crate::ops::LAYER_NORM_EPS;
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A tape plus the parameter handles bound on it.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub bind: &'a Binding,
}

impl Fwd<'_> {
    pub fn p(&self, id: ParamId) -> Var {
        self.bind.var(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    /// Truncated normal, std 0.02; zero bias.
    TruncNormal,
    /// Uniform in ±1/sqrt(fan_in) for weight and bias.
    FanIn,
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        scheme: WeightInit,
    ) -> Self {
        let w = match scheme {
            WeightInit::TruncNormal => init.trunc_normal(&[in_dim, out_dim], 0.02),
            WeightInit::FanIn => init.fan_in_uniform(&[in_dim, out_dim], in_dim),
        };
        let w = store.add(format!("{name}.weight"), w);
        let b = bias.then(|| {
            let t = match scheme {
                WeightInit::TruncNormal => Tensor::zeros(&[out_dim]),
                WeightInit::FanIn => init.fan_in_uniform(&[out_dim], in_dim),
            };
            store.add(format!("{name}.bias"), t)
        });
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), self.b.map(|b| f.p(b)));
        f.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let (g, b) = (f.p(self.gamma), f.p(self.beta));
        f.tape.layer_norm(x, g, b, self.eps)
    }
}

/// `FC₂(GELU(FC₁(x)))`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, true, WeightInit::TruncNormal),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim, true, WeightInit::TruncNormal),
        }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.tape.gelu(h)?;
        self.fc2.forward(f, h)
    }

    /// Multiply-adds per token.
    pub fn macs_per_token(&self) -> usize {
        self.fc1.in_dim * self.fc1.out_dim + self.fc2.in_dim * self.fc2.out_dim
    }
}

/// 2-D convolution over `[B, C, H, W]` maps with weight `[O, C, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = store.add(format!("{name}.weight"), init.fan_in_uniform(&[out_ch, in_ch, k, k], fan_in));
        let b = bias.then(|| store.add(format!("{name}.bias"), init.fan_in_uniform(&[out_ch], fan_in)));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), self.b.map(|b| f.p(b)));
        f.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch norm with affine parameters and running statistics kept outside the store.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            channels,
        }
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: alloc::vec::Vec<f64>,
    pub var: alloc::vec::Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`, with unbiased batch variance.
    pub fn update(&mut self, stats: &crate::ops::BnStats, count: usize, momentum: f64) {
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * stats.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * stats.var[c] * unbias;
        }
    }
}
