//! Deterministic synthetic cross-view pairs.
//!
//! A scene is an analytic top-down canvas: a textured background plus a few
//! geometric landmarks with distinct colors. The reference image samples it on
//! the pixel grid; the query is a rotated, zoomed, color-jittered close-up of
//! one landmark (the target) with clutter. Both views are rendered from the
//! same scene function, so labels are exact by construction.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smgeo_core::fusion::ClickPrompt;
use smgeo_core::head::BBox;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `(height, width)` of the reference image.
    pub reference_extent: (usize, usize),
    pub query_extent: (usize, usize),
    /// Both extents must be multiples of this.
    pub patch_size: usize,
    /// Inclusive range of landmarks per scene, target included.
    pub landmarks: (usize, usize),
    /// Target side range in reference pixels, sampled log-uniformly.
    pub target_side: (f64, f64),
    pub distractor_side: (f64, f64),
    pub max_rotation_deg: f64,
    pub zoom: (f64, f64),
    /// Query center offset from the target center, as a fraction of the query footprint.
    pub center_jitter: f64,
    /// Per-channel gain spread of the query colors.
    pub color_jitter: f64,
    /// Click offset bound in query pixels.
    pub click_jitter: f64,
    /// Maximum number of clutter blobs in the query.
    pub clutter: usize,
    /// Uniform per-pixel noise amplitude of the query, in intensity levels.
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            reference_extent: (128, 128),
            query_extent: (64, 64),
            patch_size: 4,
            landmarks: (3, 6),
            target_side: (12.0, 80.0),
            distractor_side: (8.0, 36.0),
            max_rotation_deg: 30.0,
            zoom: (1.5, 3.0),
            center_jitter: 0.25,
            color_jitter: 0.1,
            click_jitter: 2.0,
            clutter: 3,
            pixel_noise: 6.0,
        }
    }
}

impl SynthConfig {
    /// Identity view: no rotation, unit zoom, no jitter, clutter or noise.
    pub fn exact_crop(&self) -> Self {
        Self {
            max_rotation_deg: 0.0,
            zoom: (1.0, 1.0),
            center_jitter: 0.0,
            color_jitter: 0.0,
            click_jitter: 0.0,
            clutter: 0,
            pixel_noise: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        let exts = [self.reference_extent, self.query_extent];
        if p == 0 || exts.iter().any(|&(h, w)| h == 0 || w == 0 || h % p != 0 || w % p != 0) {
            return Err(Error::Config(format!(
                "extents {:?} and {:?} must be non-zero multiples of patch size {p}",
                self.reference_extent, self.query_extent
            )));
        }
        let side = self.reference_extent.0.min(self.reference_extent.1) as f64;
        let ranges = [self.target_side, self.distractor_side, self.zoom];
        if ranges.iter().any(|&(lo, hi)| !(lo > 0.0 && lo <= hi)) || self.target_side.1 > side - 2.0 {
            return Err(Error::Config("side and zoom ranges must satisfy 0 < lo <= hi and fit the reference".into()));
        }
        if self.landmarks.0 == 0 || self.landmarks.0 > self.landmarks.1 || self.landmarks.1 > PALETTE.len() {
            return Err(Error::Config(format!("landmark range {:?} must lie within 1..={}", self.landmarks, PALETTE.len())));
        }
        let nonneg = [self.max_rotation_deg, self.center_jitter, self.color_jitter, self.click_jitter, self.pixel_noise];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("jitter and noise settings must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Saturated landmark colors, pairwise well separated.
const PALETTE: [[f64; 3]; 8] = [
    [230.0, 40.0, 40.0],
    [40.0, 180.0, 60.0],
    [40.0, 90.0, 230.0],
    [240.0, 210.0, 30.0],
    [200.0, 60.0, 200.0],
    [30.0, 200.0, 210.0],
    [245.0, 130.0, 20.0],
    [250.0, 250.0, 250.0],
];

/// Muted ground colors.
const GROUND: [[f64; 3]; 4] = [[96.0, 110.0, 80.0], [120.0, 105.0, 85.0], [100.0, 100.0, 104.0], [84.0, 96.0, 90.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Disc,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Plain,
    Stripes { period: f64 },
    Checker { period: f64 },
}

/// Relative bar thickness of a cross.
const CROSS_BAR: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub shape: Shape,
    pub center: (f64, f64),
    /// Half extents `(hw, hh)`.
    pub half: (f64, f64),
    pub color: [f64; 3],
    pub texture: Texture,
}

impl Landmark {
    /// Whether the continuous point lies inside the silhouette.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.center.0).abs(), (y - self.center.1).abs());
        let (hw, hh) = self.half;
        match self.shape {
            Shape::Rect => dx < hw && dy < hh,
            Shape::Disc => (dx / hw).powi(2) + (dy / hh).powi(2) < 1.0,
            Shape::Cross => (dx < hw && dy < hh * CROSS_BAR) || (dx < hw * CROSS_BAR && dy < hh),
        }
    }

    pub fn bbox(&self) -> BBox {
        let (cx, cy) = self.center;
        let (hw, hh) = self.half;
        BBox { x1: cx - hw, y1: cy - hh, x2: cx + hw, y2: cy + hh }
    }

    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        let (lx, ly) = (x - self.center.0, y - self.center.1);
        let dark = match self.texture {
            Texture::Plain => false,
            Texture::Stripes { period } => (lx / period).floor() as i64 % 2 == 0,
            Texture::Checker { period } => ((lx / period).floor() as i64 + (ly / period).floor() as i64) % 2 == 0,
        };
        let k = if dark { 0.6 } else { 1.0 };
        self.color.map(|c| c * k)
    }
}

/// A straight band across the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub angle: f64,
    pub offset: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// `(height, width)`.
    pub extent: (usize, usize),
    /// Target first; drawn last so it is never occluded.
    pub landmarks: Vec<Landmark>,
    pub ground: [[f64; 3]; 2],
    pub roads: Vec<Road>,
}

impl Scene {
    pub fn target(&self) -> &Landmark {
        &self.landmarks[0]
    }

    /// Scene color at a continuous reference-frame point.
    pub fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        if let Some(l) = self.landmarks.iter().find(|l| l.contains(x, y)) {
            return l.color_at(x, y);
        }
        let (h, w) = (self.extent.0 as f64, self.extent.1 as f64);
        for r in &self.roads {
            let d = (x - w / 2.0) * r.angle.sin() - (y - h / 2.0) * r.angle.cos() - r.offset;
            if d.abs() < r.width / 2.0 {
                return [70.0, 70.0, 74.0];
            }
        }
        let t = value_noise(self.seed, x / 16.0, y / 16.0);
        let grain = (unit_hash(self.seed ^ 0xA5A5, x.floor() as i64, y.floor() as i64) - 0.5) * 20.0;
        let [a, b] = self.ground;
        std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t + grain)
    }

    pub fn render_reference(&self) -> RgbImage {
        let (h, w) = self.extent;
        RgbImage::from_fn(w as u32, h as u32, |x, y| to_rgb(self.color_at(x as f64 + 0.5, y as f64 + 0.5)))
    }
}

/// Similarity mapping between the query frame and the reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    /// Reference-frame point shown at the query center.
    pub center: (f64, f64),
    /// Rotation in radians.
    pub theta: f64,
    /// Query pixels per reference pixel.
    pub zoom: f64,
    /// `(height, width)` of the query.
    pub query_extent: (usize, usize),
}

impl ViewTransform {
    pub fn query_to_reference(&self, u: f64, v: f64) -> (f64, f64) {
        let (qx, qy) = (u - self.query_extent.1 as f64 / 2.0, v - self.query_extent.0 as f64 / 2.0);
        let (s, c) = self.theta.sin_cos();
        (self.center.0 + (c * qx - s * qy) / self.zoom, self.center.1 + (s * qx + c * qy) / self.zoom)
    }

    pub fn reference_to_query(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = ((x - self.center.0) * self.zoom, (y - self.center.1) * self.zoom);
        let (s, c) = self.theta.sin_cos();
        (c * dx + s * dy + self.query_extent.1 as f64 / 2.0, -s * dx + c * dy + self.query_extent.0 as f64 / 2.0)
    }
}

/// One training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossViewSample {
    pub id: String,
    pub scene_seed: u64,
    pub reference: RgbImage,
    pub query: RgbImage,
    /// Query-frame click on the target.
    pub click: ClickPrompt,
    /// Reference-frame target box.
    pub gt: BBox,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene seed of sample `index` under a dataset seed.
pub fn sample_seed(dataset_seed: u64, index: u64) -> u64 {
    splitmix(splitmix(dataset_seed) ^ index)
}

fn unit_hash(seed: u64, x: i64, y: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(x as u64 ^ splitmix(y as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let s = |dx: i64, dy: i64| unit_hash(seed, ix + dx, iy + dy);
    let top = s(0, 0) * (1.0 - fx) + s(1, 0) * fx;
    let bottom = s(0, 1) * (1.0 - fx) + s(1, 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn to_rgb(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        (rng.gen_range(lo.ln()..hi.ln())).exp()
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn random_landmark(rng: &mut impl Rng, side: (f64, f64), extent: (usize, usize), color: [f64; 3]) -> Landmark {
    let s = log_uniform(rng, side.0, side.1);
    let aspect = rng.gen_range(0.7f64..1.4).sqrt();
    let (h, w) = (extent.0 as f64, extent.1 as f64);
    let half = ((s * aspect / 2.0).min(w / 2.0 - 1.0), (s / aspect / 2.0).min(h / 2.0 - 1.0));
    let center = (rng.gen_range(half.0 + 1.0..=w - half.0 - 1.0), rng.gen_range(half.1 + 1.0..=h - half.1 - 1.0));
    let shape = *[Shape::Rect, Shape::Disc, Shape::Cross].choose(rng).expect("non-empty");
    let texture = match rng.gen_range(0..3) {
        0 => Texture::Plain,
        1 => Texture::Stripes { period: rng.gen_range(2.0..5.0) },
        _ => Texture::Checker { period: rng.gen_range(2.0..5.0) },
    };
    Landmark { shape, center, half, color, texture }
}

fn boxes_overlap(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x1 - margin < b.x2 && b.x1 - margin < a.x2 && a.y1 - margin < b.y2 && b.y1 - margin < a.y2
}

/// Draws the scene and the query viewpoint for `seed`.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<(Scene, ViewTransform)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = cfg.reference_extent;
    let g = GROUND.choose_multiple(&mut rng, 2).copied().collect::<Vec<_>>();
    let n = rng.gen_range(cfg.landmarks.0..=cfg.landmarks.1);
    let colors: Vec<[f64; 3]> = PALETTE.choose_multiple(&mut rng, n).copied().collect();

    let target = random_landmark(&mut rng, cfg.target_side, extent, colors[0]);
    let tb = target.bbox();
    let mut landmarks = vec![target];
    for &color in &colors[1..] {
        let mut placed = None;
        for _ in 0..64 {
            let l = random_landmark(&mut rng, cfg.distractor_side, extent, color);
            if !boxes_overlap(&l.bbox(), &tb, 3.0) {
                placed = Some(l);
                break;
            }
        }
        landmarks.extend(placed);
    }
    let roads = (0..rng.gen_range(0..=2))
        .map(|_| Road {
            angle: rng.gen_range(0.0..PI),
            offset: rng.gen_range(-0.4..0.4) * extent.0.min(extent.1) as f64,
            width: rng.gen_range(3.0..7.0),
        })
        .collect();
    let scene = Scene { seed, extent, landmarks, ground: [g[0], g[1]], roads };

    let theta = uniform(&mut rng, -cfg.max_rotation_deg, cfg.max_rotation_deg).to_radians();
    let zoom = uniform(&mut rng, cfg.zoom.0, cfg.zoom.1);
    let (qh, qw) = cfg.query_extent;
    let j = cfg.center_jitter;
    let (ox, oy) = (uniform(&mut rng, -j, j) * qw as f64 / zoom, uniform(&mut rng, -j, j) * qh as f64 / zoom);
    let tc = scene.target().center;
    let view = ViewTransform {
        center: ((tc.0 + ox).round(), (tc.1 + oy).round()),
        theta,
        zoom,
        query_extent: cfg.query_extent,
    };
    Ok((scene, view))
}

/// Renders a full sample deterministically from `seed`.
pub fn generate_pair(seed: u64, cfg: &SynthConfig) -> Result<CrossViewSample> {
    let (scene, view) = generate_scene(seed, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x51CE));
    let (qh, qw) = cfg.query_extent;
    let target = scene.target();

    let (tu, tv) = view.reference_to_query(target.center.0, target.center.1);
    let inside = |u: f64, v: f64| {
        let (x, y) = view.query_to_reference(u, v);
        u >= 0.0 && v >= 0.0 && u < qw as f64 && v < qh as f64 && target.contains(x, y)
    };
    let mut click = (tu, tv);
    if cfg.click_jitter > 0.0 {
        for _ in 0..32 {
            let r = cfg.click_jitter * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(0.0..2.0 * PI);
            let (u, v) = (tu + r * a.cos(), tv + r * a.sin());
            if inside(u, v) {
                click = (u, v);
                break;
            }
        }
    }

    let cj = cfg.color_jitter;
    let gain: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, 1.0 - cj, 1.0 + cj));
    let bias: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, -cj, cj) * 40.0);
    let mut query = RgbImage::from_fn(qw as u32, qh as u32, |x, y| {
        let (rx, ry) = view.query_to_reference(x as f64 + 0.5, y as f64 + 0.5);
        let c = scene.color_at(rx, ry);
        to_rgb(std::array::from_fn(|k| c[k] * gain[k] + bias[k]))
    });
    if cfg.pixel_noise > 0.0 {
        for p in query.pixels_mut() {
            let n = rng.gen_range(-cfg.pixel_noise..=cfg.pixel_noise);
            *p = to_rgb(p.0.map(|v| v as f64 + n));
        }
    }
    for _ in 0..rng.gen_range(0..=cfg.clutter) {
        let s = rng.gen_range(2..=6) as i64;
        let (bx, by) = (rng.gen_range(0..qw as i64), rng.gen_range(0..qh as i64));
        if ((bx + s / 2) as f64 - click.0).hypot((by + s / 2) as f64 - click.1) < 6.0 + s as f64 {
            continue;
        }
        let c = to_rgb(std::array::from_fn(|_| rng.gen_range(0.0..255.0)));
        for y in by..(by + s).min(qh as i64) {
            for x in bx..(bx + s).min(qw as i64) {
                query.put_pixel(x as u32, y as u32, c);
            }
        }
    }

    Ok(CrossViewSample {
        id: String::new(),
        scene_seed: seed,
        reference: scene.render_reference(),
        query,
        click: ClickPrompt::at(click.0, click.1),
        gt: target.bbox(),
    })
}
