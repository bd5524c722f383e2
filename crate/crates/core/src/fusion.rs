//! Query-guided fusion of reference features, conditioned on a click in the query.
//!
//! The click becomes a Gaussian mask at the query feature resolution, appended
//! as an extra channel and projected back. The pooled query vector then scores
//! every reference location through a sigmoid, and the scores gate the
//! reference features.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::TokenMap;
use crate::error::{mismatch, Error, Result};
use crate::nn::{Fwd, Linear, WeightInit};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A pixel position in the query image; `valid = false` runs the unprompted path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickPrompt {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

impl ClickPrompt {
    pub fn at(u: f64, v: f64) -> Self {
        Self { u, v, valid: true }
    }

    pub fn none() -> Self {
        Self { u: 0.0, v: 0.0, valid: false }
    }

    /// Checks `0 ≤ u < width`, `0 ≤ v < height` for valid prompts.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !self.valid {
            return Ok(());
        }
        let inside = |p: f64, ext: usize| p.is_finite() && p >= 0.0 && p < ext as f64;
        if !inside(self.u, width) || !inside(self.v, height) {
            return Err(Error::Input(format!(
                "click ({}, {}) lies outside the {width}x{height} query image",
                self.u, self.v
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct FusionConfig {
    /// Backbone stage whose features are fused (0..=3).
    pub stage: usize,
    /// Click Gaussian width in feature cells.
    pub sigma_p: f64,
    /// Divide the query/reference dot product by `sqrt(C)` before the sigmoid.
    pub scaled: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { stage: 3, sigma_p: 1.5, scaled: true }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage > 3 {
            return Err(Error::Config(format!("fusion stage must be 0..=3, got {}", self.stage)));
        }
        if !(self.sigma_p > 0.0) {
            return Err(Error::Config("click sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// Gaussian click mask over an `hf × wf` feature grid of an `h × w` image.
///
/// Cell `(x, y)` sits at feature coordinate `(x, y)`; the click maps to
/// `(u·wf/w, v·hf/h)`. Invalid prompts give an all-zero mask.
pub fn click_mask(prompt: &ClickPrompt, image: (usize, usize), feat: (usize, usize), sigma: f64) -> Result<Vec<f64>> {
    let (h, w) = image;
    let (hf, wf) = feat;
    prompt.validate(h, w)?;
    if !prompt.valid {
        return Ok(vec![0.0; hf * wf]);
    }
    let cx = prompt.u * wf as f64 / w as f64;
    let cy = prompt.v * hf as f64 / h as f64;
    let denom = 2.0 * sigma * sigma;
    Ok((0..hf * wf)
        .map(|i| {
            let (x, y) = ((i % wf) as f64, (i / wf) as f64);
            libm::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / denom)
        })
        .collect())
}

/// Spatial mean of every map: `[B·h·w, C] → [B, C]`.
pub fn pool_query(tape: &mut Tape, fq: TokenMap) -> Result<Var> {
    if fq.h * fq.w == 0 {
        return Err(Error::Shape("cannot pool an empty map".into()));
    }
    let x = tape.reshape(fq.var, &[fq.batch, fq.h * fq.w, fq.c])?;
    tape.mean_axis(x, 1)
}

/// `A = sigmoid(F̄qᵀ·Fr(i,j) [/ sqrt(C)])` at every reference location: `[B·h·w]`.
pub fn fusion_attention(tape: &mut Tape, pooled: Var, fr: TokenMap, scaled: bool) -> Result<Var> {
    let ps = tape.shape(pooled).to_vec();
    if ps != [fr.batch, fr.c] {
        return Err(mismatch("fusion_attention", &ps, &[fr.batch, fr.c]));
    }
    let r = tape.reshape(fr.var, &[fr.batch, fr.h * fr.w, fr.c])?;
    let q = tape.reshape(pooled, &[fr.batch, fr.c, 1])?;
    let mut logits = tape.bmm(r, q, false, false)?;
    if scaled {
        logits = tape.scale(logits, 1.0 / libm::sqrt(fr.c as f64))?;
    }
    let a = tape.sigmoid(logits)?;
    tape.reshape(a, &[fr.rows()])
}

/// Gates every reference feature vector by its attention score.
pub fn apply_fusion(tape: &mut Tape, attention: Var, fr: TokenMap) -> Result<TokenMap> {
    if tape.value(attention).numel() != fr.rows() {
        return Err(mismatch("apply_fusion", tape.shape(attention), &[fr.rows()]));
    }
    let var = tape.scale_rows(fr.var, attention)?;
    Ok(TokenMap { var, ..fr })
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `[B·h·w]` scores in (0, 1).
    pub attention: Var,
    /// Gated reference features.
    pub fused: TokenMap,
    /// Pooled prompt-conditioned query vectors `[B, C]`.
    pub pooled: Var,
}

/// Click conditioning plus query-guided gating.
#[derive(Debug, Clone)]
pub struct QueryFusion {
    pub proj: Linear,
    pub cfg: FusionConfig,
}

impl QueryFusion {
    /// The projection starts as identity on the feature channels so the
    /// unprompted path initially passes features through unchanged.
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, channels: usize, cfg: &FusionConfig) -> Self {
        let proj = Linear::new(store, init, &format!("{name}.click_proj"), channels + 1, channels, true, WeightInit::FanIn);
        let mask_row = init.fan_in_uniform(&[channels], channels + 1);
        let w = Tensor::from_fn(&[channels + 1, channels], |i| {
            let (r, c) = (i / channels, i % channels);
            if r == channels {
                mask_row.data()[c]
            } else if r == c {
                1.0
            } else {
                0.0
            }
        });
        *store.get_mut(proj.w) = w;
        *store.get_mut(proj.b.expect("bias")) = Tensor::zeros(&[channels]);
        Self { proj, cfg: cfg.clone() }
    }

    /// Appends the click mask channel and projects back to `C` channels.
    pub fn encode_click(&self, f: &mut Fwd<'_>, fq: TokenMap, clicks: &[ClickPrompt], query_extent: (usize, usize)) -> Result<TokenMap> {
        if clicks.len() != fq.batch {
            return Err(Error::Input(format!("{} clicks for a batch of {}", clicks.len(), fq.batch)));
        }
        let mut mask = Vec::with_capacity(fq.rows());
        for c in clicks {
            mask.extend(click_mask(c, query_extent, (fq.h, fq.w), self.cfg.sigma_p)?);
        }
        let m = f.tape.constant(Tensor::new(&[fq.rows(), 1], mask)?);
        let x = f.tape.concat_cols(fq.var, m)?;
        let var = self.proj.forward(f, x)?;
        Ok(TokenMap { var, ..fq })
    }

    pub fn forward(
        &self,
        f: &mut Fwd<'_>,
        fq: TokenMap,
        fr: TokenMap,
        clicks: &[ClickPrompt],
        query_extent: (usize, usize),
    ) -> Result<FusionOutput> {
        if fq.c != fr.c || fq.batch != fr.batch {
            return Err(mismatch("fusion", &[fq.batch, fq.c], &[fr.batch, fr.c]));
        }
        let q = self.encode_click(f, fq, clicks, query_extent)?;
        let pooled = pool_query(f.tape, q)?;
        let attention = fusion_attention(f.tape, pooled, fr, self.cfg.scaled)?;
        let fused = apply_fusion(f.tape, attention, fr)?;
        Ok(FusionOutput { attention, fused, pooled })
    }
}
