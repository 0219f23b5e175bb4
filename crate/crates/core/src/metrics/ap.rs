use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Which image the box belongs to.
    pub image: usize,
    pub bbox: BBox,
    /// Confidence in `[0, 1]`; absent for groundtruth.
    pub score: Option<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn push(&mut self, image: usize, bbox: BBox, score: Option<f32>) {
        self.detections.push(Detection { image, bbox, score });
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `(threshold, AP)` for each threshold averaged into `map`.
    pub per_threshold: Vec<(f64, f64)>,
}

/// 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

fn scores(pred: &DetectionSet) -> Result<Vec<f32>> {
    pred.detections
        .iter()
        .map(|d| match d.score {
            Some(s) if (0.0..=1.0).contains(&s) => Ok(s),
            Some(s) => Err(Error::InvalidArgument(format!("score {s} outside [0, 1]"))),
            None => Err(Error::InvalidArgument("prediction without a score".into())),
        })
        .collect()
}

/// 101-point interpolated AP at one IoU threshold. With no groundtruth the
/// result is 1 if there are also no predictions and 0 otherwise.
pub fn average_precision(pred: &DetectionSet, gt: &DetectionSet, threshold: f64) -> Result<f64> {
    let sc = scores(pred)?;
    if gt.is_empty() {
        return Ok(if pred.is_empty() { 1.0 } else { 0.0 });
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| sc[b].total_cmp(&sc[a]));
    let mut claimed = vec![false; gt.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &p) in order.iter().enumerate() {
        let d = &pred.detections[p];
        let mut best: Option<(f64, usize)> = None;
        for (g, gd) in gt.detections.iter().enumerate() {
            if claimed[g] || gd.image != d.image {
                continue;
            }
            let v = iou(&d.bbox, &gd.bbox);
            if v >= threshold && v > 0.0 && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        if let Some((_, g)) = best {
            claimed[g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gt.len() as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let i = recall.partition_point(|&x| x < r);
        if i < precision.len() {
            sum += precision[i];
        }
    }
    Ok(sum / 101.0)
}

/// AP at every threshold, their mean, and AP at 0.5 and 0.75.
pub fn coco_ap(pred: &DetectionSet, gt: &DetectionSet, thresholds: &[f64]) -> Result<ApReport> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no IoU thresholds".into()));
    }
    let per_threshold = thresholds
        .iter()
        .map(|&t| Ok((t, average_precision(pred, gt, t)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ApReport {
        map: per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64,
        ap50: average_precision(pred, gt, 0.5)?,
        ap75: average_precision(pred, gt, 0.75)?,
        per_threshold,
    })
}
