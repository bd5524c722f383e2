//! Anchor-free center-heatmap head: conv trunk, heatmap and box maps, targets
//! and decoding.
//!
//! Feature-map coordinates treat cell `(x, y)` as the point `(x, y)`; a box
//! center at `(c_x, c_y)` belongs to cell `(⌊c_x⌋, ⌊c_y⌋)`.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::TokenMap;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Fwd, RunningStats};
use crate::ops::{BnMode, BnStats, BATCH_NORM_EPS};
use crate::params::{Init, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validated constructor: finite corners with `x1 < x2`, `y1 < y2`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Input(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    /// Checks the box lies within a `height × width` image.
    pub fn validate_within(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > width as f64 || self.y2 > height as f64 {
            return Err(Error::Input(format!("box {self:?} exceeds the {width}x{height} image")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Box of the given size centered at `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { x1: cx - w / 2.0, y1: cy - h / 2.0, x2: cx + w / 2.0, y2: cy + h / 2.0 }
    }

    pub fn clamp(&self, height: usize, width: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct HeadConfig {
    pub hidden: usize,
    /// Initial heatmap logit bias (sigmoid ≈ 0.1).
    pub heat_bias: f64,
    pub bn_momentum: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 64, heat_bias: -2.19, bn_momentum: 0.1 }
    }
}

/// Batch-norm statistics source for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum BnUse<'a> {
    /// Per-batch statistics; the batch moments are returned.
    Train,
    /// Frozen running statistics, one entry per batch-norm layer.
    Infer(&'a [RunningStats]),
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[B, 1, H, W]`, sigmoid-activated.
    pub heat: Var,
    /// `[B, 4, H, W]` planes `(dx, dy, w, h)`.
    pub bbox: Var,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

/// Two 3×3 conv–BN–ReLU stages followed by 1×1 heatmap and box convolutions.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub heat: Conv2d,
    pub bbox: Conv2d,
}

impl DetectionHead {
    pub const BN_LAYERS: usize = 2;

    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, in_ch: usize, cfg: &HeadConfig) -> Self {
        let hid = cfg.hidden;
        let conv1 = Conv2d::new(store, init, &format!("{name}.conv1"), in_ch, hid, 3, 1, 1, true);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), hid);
        let conv2 = Conv2d::new(store, init, &format!("{name}.conv2"), hid, hid, 3, 1, 1, true);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), hid);
        let heat = Conv2d::new(store, init, &format!("{name}.heatmap"), hid, 1, 1, 1, 0, true);
        *store.get_mut(heat.b.expect("bias")) = Tensor::full(&[1], cfg.heat_bias);
        let bbox = Conv2d::new(store, init, &format!("{name}.bbox"), hid, 4, 1, 1, 0, true);
        Self { conv1, bn1, conv2, bn2, heat, bbox }
    }

    pub fn running_stats(cfg: &HeadConfig) -> Vec<RunningStats> {
        (0..Self::BN_LAYERS).map(|_| RunningStats::new(cfg.hidden)).collect()
    }

    fn conv_bn_relu(
        f: &mut Fwd<'_>,
        conv: &Conv2d,
        bn: &BatchNorm2d,
        x: Var,
        mode: BnUse<'_>,
        layer: usize,
    ) -> Result<(Var, Option<BnStats>)> {
        let y = conv.forward(f, x)?;
        let (g, b) = (f.p(bn.gamma), f.p(bn.beta));
        let m = match mode {
            BnUse::Train => BnMode::Batch { eps: BATCH_NORM_EPS },
            BnUse::Infer(stats) => {
                let s = stats
                    .get(layer)
                    .ok_or_else(|| Error::Input(format!("missing running statistics for batch norm {layer}")))?;
                BnMode::Running { mean: &s.mean, var: &s.var, eps: BATCH_NORM_EPS }
            }
        };
        let (y, stats) = f.tape.batch_norm(y, g, b, m)?;
        Ok((f.tape.relu(y)?, stats))
    }

    /// Returns the head maps and, in training mode, each batch norm's batch moments.
    pub fn forward(&self, f: &mut Fwd<'_>, x: TokenMap, mode: BnUse<'_>) -> Result<(HeadOutput, Vec<BnStats>)> {
        let t = f.tape.reshape(x.var, &[x.batch, x.h, x.w, x.c])?;
        let t = f.tape.permute(t, &[0, 3, 1, 2])?;
        let (t, s1) = Self::conv_bn_relu(f, &self.conv1, &self.bn1, t, mode, 0)?;
        let (t, s2) = Self::conv_bn_relu(f, &self.conv2, &self.bn2, t, mode, 1)?;
        let logits = self.heat.forward(f, t)?;
        let heat = f.tape.sigmoid(logits)?;
        let bbox = self.bbox.forward(f, t)?;
        let stats = s1.into_iter().chain(s2).collect();
        Ok((HeadOutput { heat, bbox, batch: x.batch, h: x.h, w: x.w }, stats))
    }
}

/// Width of the Gaussian heatmap target.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
#[derive(Default)]
pub enum SigmaMode {
    /// `max(1, min(w, h)/6)` in feature cells.
    #[default]
    Adaptive,
    Fixed(f64),
}


/// Supervision for one sample at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    /// Row-major `[H'·W']`; the positive cell is exactly 1.
    pub heatmap: Vec<f64>,
    pub feat: (usize, usize),
    /// Continuous center in feature coordinates.
    pub center: (f64, f64),
    pub offset: (f64, f64),
    /// Box size in feature cells.
    pub size: (f64, f64),
    /// Positive cell `(x, y)`.
    pub positive: (usize, usize),
    pub sigma: f64,
}

impl TargetMaps {
    /// Row-major index of the positive cell.
    pub fn positive_index(&self) -> usize {
        self.positive.1 * self.feat.1 + self.positive.0
    }

    /// `(dx, dy, w, h)` at the positive cell.
    pub fn regression(&self) -> [f64; 4] {
        [self.offset.0, self.offset.1, self.size.0, self.size.1]
    }
}

/// Projects a pixel box onto an `H' × W'` feature grid and renders its Gaussian.
pub fn build_targets(gt: &BBox, image: (usize, usize), feat: (usize, usize), sigma: SigmaMode) -> Result<TargetMaps> {
    let (hr, wr) = image;
    let (hf, wf) = feat;
    if hf == 0 || wf == 0 {
        return Err(Error::Shape("empty feature grid".into()));
    }
    gt.validate_within(hr, wr)?;
    let (sx, sy) = (wf as f64 / wr as f64, hf as f64 / hr as f64);
    let (gcx, gcy) = gt.center();
    let (cx, cy) = (gcx * sx, gcy * sy);
    let (w, h) = (gt.width() * sx, gt.height() * sy);
    let (px, py) = ((libm::floor(cx) as usize).min(wf - 1), (libm::floor(cy) as usize).min(hf - 1));
    let sigma = match sigma {
        SigmaMode::Adaptive => (w.min(h) / 6.0).max(1.0),
        SigmaMode::Fixed(s) if s > 0.0 => s,
        SigmaMode::Fixed(s) => return Err(Error::Config(format!("heatmap sigma must be > 0, got {s}"))),
    };
    let denom = 2.0 * sigma * sigma;
    let mut heatmap: Vec<f64> = (0..hf * wf)
        .map(|i| {
            let (x, y) = ((i % wf) as f64, (i / wf) as f64);
            libm::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / denom)
        })
        .collect();
    heatmap[py * wf + px] = 1.0;
    Ok(TargetMaps {
        heatmap,
        feat,
        center: (cx, cy),
        offset: (cx - px as f64, cy - py as f64),
        size: (w, h),
        positive: (px, py),
        sigma,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Box center in image pixels.
    pub center: (f64, f64),
    pub bbox: BBox,
    pub score: f64,
    /// Row-major `[H'·W']` heatmap.
    pub heatmap: Vec<f64>,
    pub feat: (usize, usize),
    /// Peak cell `(x, y)`.
    pub peak: (usize, usize),
}

/// Decodes one sample: heatmap argmax (first in row-major order on ties), then
/// offset and size read at the peak, mapped back to pixels and clamped.
///
/// `heat` is `[H'·W']`; `bbox` holds four `[H'·W']` planes `(dx, dy, w, h)`.
pub fn decode_prediction(heat: &[f64], bbox: &[f64], feat: (usize, usize), image: (usize, usize)) -> Result<Prediction> {
    let (hf, wf) = feat;
    let n = hf * wf;
    if n == 0 || heat.len() != n || bbox.len() != 4 * n {
        return Err(Error::Shape(format!(
            "decode needs {n} heat and {} box values, got {} and {}",
            4 * n,
            heat.len(),
            bbox.len()
        )));
    }
    let best = (0..n).fold(0, |b, i| if heat[i] > heat[b] { i } else { b });
    let (x, y) = (best % wf, best / wf);
    let [dx, dy, w, h] = [0, 1, 2, 3].map(|p| bbox[p * n + best]);
    let (hr, wr) = image;
    let (sx, sy) = (wr as f64 / wf as f64, hr as f64 / hf as f64);
    let center = ((x as f64 + dx) * sx, (y as f64 + dy) * sy);
    let b = BBox::from_center(center.0, center.1, w.max(0.0) * sx, h.max(0.0) * sy).clamp(hr, wr);
    Ok(Prediction { center, bbox: b, score: heat[best], heatmap: heat.to_vec(), feat, peak: (x, y) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_hand_case() {
        let gt = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let t = build_targets(&gt, (64, 64), (16, 16), SigmaMode::Fixed(2.0)).unwrap();
        assert_eq!(t.center, (1.0, 1.0));
        assert_eq!(t.offset, (0.0, 0.0));
        assert_eq!(t.size, (2.0, 2.0));
        assert_eq!(t.heatmap[t.positive_index()], 1.0);
        assert!((t.heatmap[16 + 3] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn decode_hand_case() {
        let (hf, wf) = (8, 8);
        let mut heat = alloc::vec![0.1; 64];
        heat[2 * wf + 3] = 0.9;
        let mut bbox = alloc::vec![0.0; 256];
        for (p, v) in [0.5, 0.5, 4.0, 4.0].iter().enumerate() {
            bbox[p * 64 + 2 * wf + 3] = *v;
        }
        let p = decode_prediction(&heat, &bbox, (hf, wf), (32, 32)).unwrap();
        assert_eq!(p.center, (14.0, 10.0));
        assert_eq!(p.bbox.to_array(), [6.0, 2.0, 22.0, 18.0]);
        assert_eq!(p.score, 0.9);
    }

    #[test]
    fn degenerate_and_outside_boxes_rejected() {
        assert!(BBox::new(1.0, 1.0, 1.0, 2.0).is_err());
        let b = BBox { x1: -1.0, y1: 0.0, x2: 4.0, y2: 4.0 };
        assert!(build_targets(&b, (8, 8), (2, 2), SigmaMode::Adaptive).is_err());
    }
}
