//! Split evaluation: decoded predictions, metric report and its text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use smgeo_core::head::{BBox, Prediction};
use smgeo_core::metrics::{evaluate_boxes, ScaleBands};
use smgeo_core::model::{Model, ModelState};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Split};
use crate::error::Result;
use crate::synth::CrossViewSample;
use crate::train::make_batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketReport {
    pub count: usize,
    pub miou: f64,
    pub acc25: f64,
    pub acc50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub miou: f64,
    pub acc25: f64,
    pub acc50: f64,
    /// Keyed by `small`, `medium`, `large`; empty buckets are omitted.
    pub per_bucket: BTreeMap<String, BucketReport>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>6} {:>8} {:>8} {:>8}", "bucket", "count", "mIoU", "acc@0.25", "acc@0.5");
        let total: usize = self.per_bucket.values().map(|b| b.count).sum();
        for name in ["small", "medium", "large"] {
            if let Some(b) = self.per_bucket.get(name) {
                let _ = writeln!(s, "{name:<8} {:>6} {:>8.4} {:>8.4} {:>8.4}", b.count, b.miou, b.acc25, b.acc50);
            }
        }
        let _ = writeln!(s, "{:<8} {total:>6} {:>8.4} {:>8.4} {:>8.4}", "all", self.miou, self.acc25, self.acc50);
        s
    }
}

/// Metrics for `(prediction, ground truth)` pairs on a reference image of `extent`.
pub fn report_from_pairs(pairs: &[(BBox, BBox)], extent: (usize, usize)) -> Result<EvalReport> {
    let bands = ScaleBands::for_reference_side(extent.0.max(extent.1) as f64);
    let r = evaluate_boxes(pairs, &bands)?;
    Ok(EvalReport {
        miou: r.miou,
        acc25: r.acc25,
        acc50: r.acc50,
        per_bucket: r
            .per_bucket
            .into_iter()
            .map(|(k, b)| (k.name().to_string(), BucketReport { count: b.count, miou: b.miou, acc25: b.acc25, acc50: b.acc50 }))
            .collect(),
    })
}

pub fn predict_samples(model: &Model, state: &ModelState, samples: &[CrossViewSample], batch_size: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (batch, _) = make_batch(chunk)?;
        out.extend(model.predict(state, &batch, false)?.predictions);
    }
    Ok(out)
}

pub fn evaluate_samples(model: &Model, state: &ModelState, samples: &[CrossViewSample], batch_size: usize) -> Result<EvalReport> {
    let preds = predict_samples(model, state, samples, batch_size)?;
    let pairs: Vec<(BBox, BBox)> = preds.iter().zip(samples).map(|(p, s)| (p.bbox, s.gt)).collect();
    report_from_pairs(&pairs, model.cfg.backbone.reference_extent)
}

pub fn evaluate(ck: &Checkpoint, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let model = ck.model()?;
    let samples = dataset.load_split(split)?;
    evaluate_samples(&model, &ck.state, &samples, ck.config.batch_size)
}
