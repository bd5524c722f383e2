//! Training-time augmentation: mirror, scale jitter and crop-and-pad.
//!
//! Reference-side operations form one axis-aligned map `x ↦ s·(f(x) − c) + c + t`
//! (with `f` the optional mirror) applied to the image by inverse sampling and to
//! the box by forward mapping. Scales are multiples of 1/64 and shifts are whole
//! pixels, so box and pixel geometry stay exactly representable.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use smgeo_core::head::BBox;

use crate::synth::CrossViewSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Scale jitter range; `(1, 1)` disables it.
    pub scale: (f64, f64),
    /// Random shift with zero padding.
    pub crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip: true, scale: (0.8, 1.2), crop: true }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { flip: false, scale: (1.0, 1.0), crop: false }
    }
}

const SCALE_STEPS: f64 = 64.0;

/// Reference-frame map of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefTransform {
    pub flip: bool,
    pub scale: f64,
    pub shift: (f64, f64),
    /// `(height, width)` of the image.
    pub extent: (usize, usize),
}

impl RefTransform {
    pub fn identity(extent: (usize, usize)) -> Self {
        Self { flip: false, scale: 1.0, shift: (0.0, 0.0), extent }
    }

    fn half(&self) -> (f64, f64) {
        (self.extent.1 as f64 / 2.0, self.extent.0 as f64 / 2.0)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.half();
        let xf = if self.flip { 2.0 * cx - x } else { x };
        (self.scale * (xf - cx) + cx + self.shift.0, self.scale * (y - cy) + cy + self.shift.1)
    }

    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.half();
        let xf = (x - cx - self.shift.0) / self.scale + cx;
        let yy = (y - cy - self.shift.1) / self.scale + cy;
        (if self.flip { 2.0 * cx - xf } else { xf }, yy)
    }

    pub fn apply_box(&self, b: &BBox) -> BBox {
        let (ax, ay) = self.apply(b.x1, b.y1);
        let (bx, by) = self.apply(b.x2, b.y2);
        BBox { x1: ax.min(bx), y1: ay.min(by), x2: ax.max(bx), y2: ay.max(by) }
    }

    /// Resamples `img` bilinearly; samples outside the source are black.
    pub fn warp(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = (img.width() as i64, img.height() as i64);
        let px = |x: i64, y: i64| -> [f64; 3] {
            if x < 0 || y < 0 || x >= w || y >= h {
                [0.0; 3]
            } else {
                img.get_pixel(x as u32, y as u32).0.map(f64::from)
            }
        };
        RgbImage::from_fn(img.width(), img.height(), |x, y| {
            let (sx, sy) = self.invert(x as f64 + 0.5, y as f64 + 0.5);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (tx, ty) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let mut out = [0.0; 3];
            for (dx, dy, wgt) in [(0, 0, (1.0 - tx) * (1.0 - ty)), (1, 0, tx * (1.0 - ty)), (0, 1, (1.0 - tx) * ty), (1, 1, tx * ty)] {
                if wgt != 0.0 {
                    let p = px(x0 + dx, y0 + dy);
                    (0..3).for_each(|c| out[c] += wgt * p[c]);
                }
            }
            Rgb(out.map(|v| v.round().clamp(0.0, 255.0) as u8))
        })
    }
}

/// Integer shifts along one axis that keep `[lo, hi]` inside `[0, extent]`.
fn shift_range(lo: f64, hi: f64, extent: f64) -> Option<(i64, i64)> {
    let (a, b) = ((-lo).ceil() as i64, (extent - hi).floor() as i64);
    (a <= b).then_some((a, b))
}

/// Draws a reference map that keeps `gt` fully inside the image.
pub fn draw_ref_transform(rng: &mut impl Rng, gt: &BBox, extent: (usize, usize), cfg: &AugmentConfig) -> RefTransform {
    let flip = cfg.flip && rng.gen_bool(0.5);
    let (w, h) = (extent.1 as f64, extent.0 as f64);
    let lo = (cfg.scale.0 * SCALE_STEPS).ceil() as i64;
    let hi = (cfg.scale.1 * SCALE_STEPS).floor() as i64;
    let feasible = |k: i64| {
        let t = RefTransform { flip, scale: k as f64 / SCALE_STEPS, shift: (0.0, 0.0), extent };
        let b = t.apply_box(gt);
        let xs = shift_range(b.x1, b.x2, w)?;
        let ys = shift_range(b.y1, b.y2, h)?;
        let contains_zero = |(a, b): (i64, i64)| a <= 0 && 0 <= b;
        (cfg.crop || (contains_zero(xs) && contains_zero(ys))).then_some((t, xs, ys))
    };
    let candidates: Vec<i64> = (lo.min(hi)..=hi.max(lo)).filter(|&k| feasible(k).is_some()).collect();
    let k = if candidates.is_empty() { SCALE_STEPS as i64 } else { candidates[rng.gen_range(0..candidates.len())] };
    let (mut t, xs, ys) = feasible(k).unwrap_or((RefTransform { flip, ..RefTransform::identity(extent) }, (0, 0), (0, 0)));
    if cfg.crop {
        t.shift = (rng.gen_range(xs.0..=xs.1) as f64, rng.gen_range(ys.0..=ys.1) as f64);
    }
    t
}

/// Mirrors the query horizontally, moving the click with it.
pub fn flip_query(sample: &CrossViewSample) -> CrossViewSample {
    let mut out = sample.clone();
    image::imageops::flip_horizontal_in_place(&mut out.query);
    let w = sample.query.width() as f64;
    let u = w - sample.click.u;
    out.click.u = if u < w { u } else { w.next_down() };
    out
}

/// Applies one random draw of every enabled augmentation.
pub fn augment(sample: &CrossViewSample, rng: &mut impl Rng, cfg: &AugmentConfig) -> CrossViewSample {
    let extent = (sample.reference.height() as usize, sample.reference.width() as usize);
    let t = draw_ref_transform(rng, &sample.gt, extent, cfg);
    let flip_q = cfg.flip && rng.gen_bool(0.5);
    let mut out = if flip_q { flip_query(sample) } else { sample.clone() };
    if t != RefTransform::identity(extent) {
        out.reference = t.warp(&sample.reference);
        out.gt = t.apply_box(&sample.gt);
    }
    out
}
