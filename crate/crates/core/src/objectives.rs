//! Training losses: heatmap focal loss, box L1 loss, gating entropy and their weighted sum.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gmoe::{EntropyMode, GateRecord, GatingDecision};
use crate::head::{HeadOutput, TargetMaps};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct FocalParams {
    pub gamma: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, beta: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub alpha: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.9, mu: 1.1, lambda: 0.015 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.mu, self.lambda].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Focal loss of a predicted heatmap against Gaussian targets, normalized by the
/// number of positive cells.
pub fn focal_loss(tape: &mut Tape, pred: Var, target: &[f64], params: FocalParams) -> Result<Var> {
    tape.focal_loss(pred, target, params.gamma, params.beta)
}

/// Focal loss over a batch of head outputs.
pub fn heatmap_loss(tape: &mut Tape, out: &HeadOutput, targets: &[TargetMaps], params: FocalParams) -> Result<Var> {
    check_targets(out, targets)?;
    let target: Vec<f64> = targets.iter().flat_map(|t| t.heatmap.iter().copied()).collect();
    focal_loss(tape, out.heat, &target, params)
}

/// `(1/N_pos)·Σ_pos ‖(dx,dy,w,h)_gt − (dx,dy,w,h)_pred‖₁` read at each sample's positive cell.
pub fn bbox_l1_loss(tape: &mut Tape, out: &HeadOutput, targets: &[TargetMaps]) -> Result<Var> {
    check_targets(out, targets)?;
    let n = out.h * out.w;
    let t = tape.permute(out.bbox, &[0, 2, 3, 1])?;
    let t = tape.reshape(t, &[out.batch * n, 4])?;
    let rows = targets.iter().enumerate().map(|(b, tm)| Some(b * n + tm.positive_index())).collect();
    let picked = tape.gather_rows(t, rows)?;
    let gt: Vec<f64> = targets.iter().flat_map(|t| t.regression()).collect();
    let gt = tape.constant(Tensor::new(&[targets.len(), 4], gt)?);
    let d = tape.sub(picked, gt)?;
    let d = tape.abs(d)?;
    let s = tape.sum(d)?;
    tape.scale(s, 1.0 / targets.len() as f64)
}

fn check_targets(out: &HeadOutput, targets: &[TargetMaps]) -> Result<()> {
    if targets.len() != out.batch || targets.iter().any(|t| t.feat != (out.h, out.w)) {
        return Err(Error::Shape(format!(
            "{} targets do not match a batch of {} {}x{} maps",
            targets.len(),
            out.batch,
            out.h,
            out.w
        )));
    }
    Ok(())
}

/// Mean over every routed grid of `Σ_i g_i ln g_i` (negative mean entropy).
///
/// `None` when no GMoE layer ran.
pub fn entropy_term(tape: &mut Tape, gates: &[GateRecord], mode: EntropyMode) -> Result<Option<Var>> {
    let total: usize = gates.iter().map(|g| g.decision.grids()).sum();
    if total == 0 {
        return Ok(None);
    }
    let mut acc: Option<Var> = None;
    for g in gates {
        let dist = match mode {
            EntropyMode::Renormalized => g.weights,
            EntropyMode::FullSoftmax => tape.softmax(g.logits, 1)?,
        };
        let m = tape.neg_entropy_mean(dist)?;
        let m = tape.scale(m, g.decision.grids() as f64 / total as f64)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    Ok(acc)
}

/// `λ·(1/G)·Σ_g Σ_i g_i ln g_i` over recorded decisions (renormalized weights).
pub fn entropy_loss<'a>(decisions: impl IntoIterator<Item = &'a GatingDecision>, lambda: f64) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for d in decisions {
        for row in d.weights.chunks(d.top_k) {
            s += row.iter().filter(|&&w| w > 0.0).map(|&w| w * libm::log(w)).sum::<f64>();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("entropy loss over zero grids".into()));
    }
    Ok(lambda * s / n as f64)
}

/// Loss components of one forward pass, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub heatmap: Var,
    pub bbox: Var,
    /// Negative mean entropy; absent without GMoE layers.
    pub entropy: Option<Var>,
}

/// `α·L_hm + μ·L_bbox + λ·L_entropy`.
pub fn total_loss(tape: &mut Tape, parts: LossParts, w: LossWeights) -> Result<Var> {
    let comps = [("heatmap", Some(parts.heatmap)), ("bbox", Some(parts.bbox)), ("entropy", parts.entropy)];
    for (name, v) in comps {
        if let Some(v) = v {
            if !tape.value(v).is_finite() {
                return Err(Error::NonFiniteLoss(name));
            }
        }
    }
    let a = tape.scale(parts.heatmap, w.alpha)?;
    let b = tape.scale(parts.bbox, w.mu)?;
    let mut t = tape.add(a, b)?;
    if let Some(e) = parts.entropy {
        let e = tape.scale(e, w.lambda)?;
        t = tape.add(t, e)?;
    }
    Ok(t)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(heatmap: f64, bbox: f64, entropy: f64, w: LossWeights) -> Result<f64> {
    for (name, v) in [("heatmap", heatmap), ("bbox", bbox), ("entropy", entropy)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    Ok(w.alpha * heatmap + w.mu * bbox + w.lambda * entropy)
}
