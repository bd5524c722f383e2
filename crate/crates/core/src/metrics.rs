//! Localization metrics: IoU, mIoU, accuracy at an IoU threshold, scale buckets,
//! and the center-to-box conversion used to score retrieval-style baselines.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::head::BBox;

/// Intersection over union of two axis-aligned boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean IoU over prediction/ground-truth pairs.
pub fn miou(pairs: &[(BBox, BBox)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("mIoU of an empty set".into()));
    }
    Ok(pairs.iter().map(|(p, g)| iou(p, g)).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of IoUs strictly greater than `t`.
pub fn acc_at_t(ious: &[f64], t: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Input(format!("IoU threshold must lie in (0, 1), got {t}")));
    }
    Ok(ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64)
}

/// Box with the ground truth's size centered at a matched-region center,
/// clamped to a `height × width` reference image.
pub fn retrieval_to_bbox(center: (f64, f64), gt: &BBox, image: (usize, usize)) -> BBox {
    BBox::from_center(center.0, center.1, gt.width(), gt.height()).clamp(image.0, image.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScaleBucket {
    Small,
    Medium,
    Large,
}

impl ScaleBucket {
    pub const ALL: [ScaleBucket; 3] = [ScaleBucket::Small, ScaleBucket::Medium, ScaleBucket::Large];

    pub fn name(self) -> &'static str {
        match self {
            ScaleBucket::Small => "small",
            ScaleBucket::Medium => "medium",
            ScaleBucket::Large => "large",
        }
    }
}

/// Area bands: below `small_side²` is small, above `large_side²` is large.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ScaleBands {
    pub small_side: f64,
    pub large_side: f64,
}

impl Default for ScaleBands {
    fn default() -> Self {
        Self { small_side: 300.0, large_side: 512.0 }
    }
}

impl ScaleBands {
    /// Reference resolution the default bands are defined at.
    pub const REFERENCE_SIDE: f64 = 1024.0;

    /// Default bands rescaled to a reference image of side `side` pixels.
    pub fn for_reference_side(side: f64) -> Self {
        let k = side / Self::REFERENCE_SIDE;
        let d = Self::default();
        Self { small_side: d.small_side * k, large_side: d.large_side * k }
    }

    pub fn bucket(&self, b: &BBox) -> ScaleBucket {
        let a = b.area();
        if a < self.small_side * self.small_side {
            ScaleBucket::Small
        } else if a > self.large_side * self.large_side {
            ScaleBucket::Large
        } else {
            ScaleBucket::Medium
        }
    }
}

/// Bucket under the default 300²/512² bands.
pub fn scale_bucket(gt: &BBox) -> ScaleBucket {
    ScaleBands::default().bucket(gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketMetrics {
    pub count: usize,
    pub miou: f64,
    pub acc25: f64,
    pub acc50: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    pub acc25: f64,
    pub acc50: f64,
    /// Non-empty buckets only.
    pub per_bucket: BTreeMap<ScaleBucket, BucketMetrics>,
}

fn summarize(ious: &[f64]) -> Result<BucketMetrics> {
    Ok(BucketMetrics {
        count: ious.len(),
        miou: ious.iter().sum::<f64>() / ious.len().max(1) as f64,
        acc25: acc_at_t(ious, 0.25)?,
        acc50: acc_at_t(ious, 0.5)?,
    })
}

/// Overall and per-bucket metrics for `(prediction, ground truth)` pairs.
pub fn evaluate_boxes(pairs: &[(BBox, BBox)], bands: &ScaleBands) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("no samples to evaluate".into()));
    }
    let ious: Vec<f64> = pairs.iter().map(|(p, g)| iou(p, g)).collect();
    let all = summarize(&ious)?;
    let mut per_bucket = BTreeMap::new();
    for bucket in ScaleBucket::ALL {
        let sub: Vec<f64> = pairs
            .iter()
            .zip(&ious)
            .filter(|((_, g), _)| bands.bucket(g) == bucket)
            .map(|(_, v)| *v)
            .collect();
        if !sub.is_empty() {
            per_bucket.insert(bucket, summarize(&sub)?);
        }
    }
    Ok(MetricsReport { miou: all.miou, acc25: all.acc25, acc50: all.acc50, per_bucket })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(0.0, 0.0, 2.0, 2.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert!((iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_strict() {
        assert!((acc_at_t(&[0.3, 0.6, 0.1], 0.25).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(acc_at_t(&[0.5], 0.5).unwrap(), 0.0);
        assert!(matches!(acc_at_t(&[], 0.5), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn buckets() {
        assert_eq!(scale_bucket(&b(0.0, 0.0, 100.0, 100.0)), ScaleBucket::Small);
        assert_eq!(scale_bucket(&b(0.0, 0.0, 400.0, 400.0)), ScaleBucket::Medium);
        assert_eq!(scale_bucket(&b(0.0, 0.0, 600.0, 600.0)), ScaleBucket::Large);
    }
}
