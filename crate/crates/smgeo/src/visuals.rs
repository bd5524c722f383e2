//! Visual exports: heatmap and box overlays on the reference, and per-layer expert maps.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use smgeo_core::gmoe::{GateRecord, View};
use smgeo_core::head::{BBox, Prediction};
use smgeo_core::model::{Model, ModelState};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::imaging::{blend, draw_marker, draw_rect, save_png};
use crate::synth::CrossViewSample;
use crate::train::make_batch;

pub const PRED_COLOR: Rgb<u8> = Rgb([255, 40, 40]);
pub const GT_COLOR: Rgb<u8> = Rgb([40, 255, 80]);
pub const MARKER_COLOR: Rgb<u8> = Rgb([255, 255, 255]);

/// Distinct expert colors; expert `e` uses entry `e % len`.
pub const EXPERT_PALETTE: [Rgb<u8>; 8] = [
    Rgb([230, 25, 75]),
    Rgb([60, 180, 75]),
    Rgb([255, 225, 25]),
    Rgb([0, 130, 200]),
    Rgb([245, 130, 48]),
    Rgb([145, 30, 180]),
    Rgb([70, 240, 240]),
    Rgb([240, 50, 230]),
];

/// Dark-to-bright ramp for heat values in `[0, 1]`.
pub fn heat_color(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [[0.0, 0.0, 64.0], [120.0, 0.0, 160.0], [230.0, 60.0, 60.0], [255.0, 180.0, 0.0], [255.0, 255.0, 200.0]];
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    Rgb(std::array::from_fn(|c| (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f).round() as u8))
}

/// Feature cell covering pixel `(x, y)` of an image of `extent`.
fn cell_of(x: u32, y: u32, extent: (usize, usize), cells: (usize, usize)) -> (usize, usize) {
    ((x as usize * cells.1 / extent.1).min(cells.1 - 1), (y as usize * cells.0 / extent.0).min(cells.0 - 1))
}

/// Pixel center of the heatmap peak cell.
pub fn peak_marker(pred: &Prediction, extent: (usize, usize)) -> (f64, f64) {
    let sx = extent.1 as f64 / pred.feat.1 as f64;
    let sy = extent.0 as f64 / pred.feat.0 as f64;
    ((pred.peak.0 as f64 + 0.5) * sx, (pred.peak.1 as f64 + 0.5) * sy)
}

/// Min-max normalized heatmap blended over the reference, with the peak marked.
pub fn heatmap_overlay(reference: &RgbImage, pred: &Prediction) -> (RgbImage, (f64, f64)) {
    let extent = (reference.height() as usize, reference.width() as usize);
    let lo = pred.heatmap.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pred.heatmap.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::from_fn(reference.width(), reference.height(), |x, y| {
        let (cx, cy) = cell_of(x, y, extent, pred.feat);
        let t = (pred.heatmap[cy * pred.feat.1 + cx] - lo) / span;
        blend(*reference.get_pixel(x, y), heat_color(t), 0.55)
    });
    let marker = peak_marker(pred, extent);
    draw_marker(&mut img, marker.0, marker.1, MARKER_COLOR);
    (img, marker)
}

pub fn box_overlay(reference: &RgbImage, pred: &BBox, gt: &BBox) -> RgbImage {
    let mut img = reference.clone();
    draw_rect(&mut img, gt.to_array(), GT_COLOR);
    draw_rect(&mut img, pred.to_array(), PRED_COLOR);
    img
}

/// Routing of one GMoE layer for a single sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivation {
    pub view: String,
    pub stage: usize,
    pub block: usize,
    /// `[rows, cols]` of the routing grid.
    pub grid: [usize; 2],
    pub num_experts: usize,
    /// Highest-weight expert per grid cell, row-major.
    pub primary: Vec<usize>,
    /// Selected experts per cell, `top_k` each.
    pub selected: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl LayerActivation {
    pub fn from_record(r: &GateRecord) -> Self {
        let d = &r.decision;
        Self {
            view: match r.view {
                View::Query => "query".into(),
                View::Reference => "reference".into(),
            },
            stage: r.stage,
            block: r.block,
            grid: [r.grid.0, r.grid.1],
            num_experts: d.num_experts,
            primary: d.primary_experts(),
            selected: d.selected.chunks(d.top_k).map(<[usize]>::to_vec).collect(),
            weights: d.weights.chunks(d.top_k).map(<[f64]>::to_vec).collect(),
        }
    }

    /// Flat expert-colored map at `extent`; uses at most `num_experts` colors.
    pub fn render(&self, extent: (usize, usize)) -> RgbImage {
        let cells = (self.grid[0], self.grid[1]);
        RgbImage::from_fn(extent.1 as u32, extent.0 as u32, |x, y| {
            let (cx, cy) = cell_of(x, y, extent, cells);
            EXPERT_PALETTE[self.primary[cy * cells.1 + cx] % EXPERT_PALETTE.len()]
        })
    }

    fn file_stem(&self) -> String {
        format!("{}_s{}b{}", self.view, self.stage, self.block)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationDump {
    pub sample_id: String,
    pub layers: Vec<LayerActivation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleVisuals {
    pub id: String,
    pub heatmap_png: PathBuf,
    pub boxes_png: PathBuf,
    pub activations_json: PathBuf,
    pub activation_pngs: Vec<PathBuf>,
    pub prediction: Prediction,
    pub peak_marker: (f64, f64),
}

pub fn export_sample(model: &Model, state: &ModelState, sample: &CrossViewSample, out: &Path) -> Result<SampleVisuals> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (batch, _) = make_batch(std::slice::from_ref(sample))?;
    let result = model.predict(state, &batch, true)?;
    let pred = result.predictions.into_iter().next().expect("one prediction per sample");
    let id = &sample.id;

    let (heat, marker) = heatmap_overlay(&sample.reference, &pred);
    let heatmap_png = out.join(format!("{id}_heatmap.png"));
    save_png(&heat, &heatmap_png)?;
    let boxes_png = out.join(format!("{id}_boxes.png"));
    save_png(&box_overlay(&sample.reference, &pred.bbox, &sample.gt), &boxes_png)?;

    let layers: Vec<LayerActivation> = result.gates.unwrap_or_default().iter().map(LayerActivation::from_record).collect();
    let mut activation_pngs = Vec::new();
    for layer in &layers {
        let img = if layer.view == "query" { &sample.query } else { &sample.reference };
        let path = out.join(format!("{id}_experts_{}.png", layer.file_stem()));
        save_png(&layer.render((img.height() as usize, img.width() as usize)), &path)?;
        activation_pngs.push(path);
    }
    let activations_json = out.join(format!("{id}_experts.json"));
    let dump = ActivationDump { sample_id: id.clone(), layers };
    std::fs::write(&activations_json, serde_json::to_string_pretty(&dump).expect("serializable"))
        .map_err(|e| Error::io(&activations_json, e))?;
    Ok(SampleVisuals { id: id.clone(), heatmap_png, boxes_png, activations_json, activation_pngs, prediction: pred, peak_marker: marker })
}

pub fn export_visuals(ck: &Checkpoint, dataset: &Dataset, ids: &[String], out: &Path) -> Result<Vec<SampleVisuals>> {
    let records = ids
        .iter()
        .map(|id| dataset.get(id).ok_or_else(|| Error::NotFound(format!("sample id {id}"))))
        .collect::<Result<Vec<_>>>()?;
    let model = ck.model()?;
    records.into_iter().map(|r| export_sample(&model, &ck.state, &dataset.load_sample(r)?, out)).collect()
}
