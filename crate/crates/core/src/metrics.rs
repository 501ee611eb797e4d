//! Detection evaluation: IoU, greedy matching, precision/recall, AP and mAP.
//!
//! AP is the 101-point interpolated area under the precision/recall curve:
//! the precision envelope is made monotone non-increasing, then sampled at
//! recall `0.00, 0.01, ..., 1.00`. The same rule is used for every IoU
//! threshold.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

mod io;

pub use io::{parse_detections, parse_ground_truth, read_detections, read_ground_truth};

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub const RANGE_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Number of recall sample points used by [`average_precision`].
pub const RECALL_POINTS: usize = 101;

/// Axis-aligned box in absolute corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::validation("box coordinates must be finite"));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::validation(format!(
                "box ({x1}, {y1}, {x2}, {y2}) has non-positive area"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub image_id: String,
    pub category: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(
        image_id: impl Into<String>,
        category: u32,
        bbox: BBox,
        confidence: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::validation(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Detection {
            image_id: image_id.into(),
            category,
            bbox,
            confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub category: u32,
    pub bbox: BBox,
}

impl GroundTruth {
    pub fn new(image_id: impl Into<String>, category: u32, bbox: BBox) -> Self {
        GroundTruth {
            image_id: image_id.into(),
            category,
            bbox,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Outcome of greedy matching for one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Detection indices in evaluation order (descending confidence).
    pub order: Vec<usize>,
    /// `true` for a true positive, aligned with `order`.
    pub labels: Vec<bool>,
    /// Index of the matched ground truth for each entry of `order`.
    pub matched_gt: Vec<Option<usize>>,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn false_positives(&self) -> usize {
        self.labels.len() - self.true_positives()
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::validation(format!(
            "IoU threshold {t} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Greedy highest-confidence-first matching within one category.
///
/// Confidence ties keep input order. Each detection takes the unmatched
/// ground truth of its image with the highest IoU at or above `iou_thresh`;
/// IoU ties go to the lowest ground-truth index.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Result<MatchResult> {
    check_threshold(iou_thresh)?;
    if let Some(first) = dets
        .first()
        .map(|d| d.category)
        .or(gts.first().map(|g| g.category))
    {
        let mixed =
            dets.iter().any(|d| d.category != first) || gts.iter().any(|g| g.category != first);
        if mixed {
            return Err(Error::validation(
                "match_detections expects a single category",
            ));
        }
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));

    let mut used = vec![false; gts.len()];
    let mut labels = Vec::with_capacity(dets.len());
    let mut matched_gt = Vec::with_capacity(dets.len());
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != det.image_id {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        labels.push(best.is_some());
        matched_gt.push(best.map(|(g, _)| g));
    }
    Ok(MatchResult {
        order,
        labels,
        matched_gt,
        false_negatives: used.iter().filter(|&&u| !u).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision and recall after each detection.
///
/// With `total_gt == 0` every recall is 0.
pub fn pr_curve(labels: &[bool], total_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    labels
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            tp += l as usize;
            PrPoint {
                precision: tp as f64 / (k + 1) as f64,
                recall: if total_gt == 0 {
                    0.0
                } else {
                    tp as f64 / total_gt as f64
                },
            }
        })
        .collect()
}

/// 101-point interpolated AP. Recalls must be non-decreasing.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len() - 1).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut i = 0;
    for t in 0..RECALL_POINTS {
        let r = t as f64 / 100.0;
        while i < curve.len() && curve[i].recall < r {
            i += 1;
        }
        if i == curve.len() {
            break;
        }
        sum += envelope[i];
    }
    sum / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// AP for each category at each threshold, ordered like `thresholds`.
    pub per_category_ap: BTreeMap<u32, Vec<f64>>,
    /// Mean AP over categories at the first threshold.
    pub map50: f64,
    /// Mean over categories of the mean AP across all thresholds.
    pub map5095: f64,
    pub dataset_precision: f64,
    pub dataset_recall: f64,
    /// False when there were no detections, in which case precision is
    /// reported as 0.
    pub precision_defined: bool,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    v.sum::<f64>() / n as f64
}

/// Evaluates detections against ground truth at every threshold.
///
/// Categories are the union of those seen in either input; a category with
/// detections but no ground truth scores AP 0. Dataset precision and recall
/// are aggregated over all categories at `thresholds[0]`.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64]) -> Result<EvalResult> {
    if thresholds.is_empty() {
        return Err(Error::validation("at least one IoU threshold is required"));
    }
    for &t in thresholds {
        check_threshold(t)?;
    }
    if gts.is_empty() {
        return Err(Error::degenerate(
            "no ground-truth boxes: every category is empty",
        ));
    }

    let mut by_cat: BTreeMap<u32, (Vec<Detection>, Vec<GroundTruth>)> = BTreeMap::new();
    for d in dets {
        by_cat.entry(d.category).or_default().0.push(d.clone());
    }
    for g in gts {
        by_cat.entry(g.category).or_default().1.push(g.clone());
    }

    let mut per_category_ap = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&cat, (cd, cg)) in &by_cat {
        let mut aps = Vec::with_capacity(thresholds.len());
        for (ti, &t) in thresholds.iter().enumerate() {
            let m = match_detections(cd, cg, t)?;
            if ti == 0 {
                tp += m.true_positives();
                fp += m.false_positives();
                fn_ += m.false_negatives;
            }
            aps.push(average_precision(&pr_curve(&m.labels, cg.len())));
        }
        per_category_ap.insert(cat, aps);
    }

    let map50 = mean(per_category_ap.values().map(|a| a[0]));
    let map5095 = mean(per_category_ap.values().map(|a| mean(a.iter().copied())));
    let precision_defined = tp + fp > 0;
    Ok(EvalResult {
        thresholds: thresholds.to_vec(),
        per_category_ap,
        map50,
        map5095,
        dataset_precision: if precision_defined {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        },
        dataset_recall: tp as f64 / (tp + fn_) as f64,
        precision_defined,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}
