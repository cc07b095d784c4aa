//! Detection-quality evaluation: greedy score-ordered matching, all-point
//! interpolated average precision, mAP at a single IoU threshold, and the
//! COCO-style sweep over IoU 0.50..0.95.
//!
//! Matching is always per image; precision/recall curves pool matched
//! detections globally per class.

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};
use std::collections::BTreeMap;

/// One matched detection in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetMatch {
    pub score: f64,
    /// (image index, detection index) — image is 0 for single-image matching.
    pub det_index: (usize, usize),
    pub is_tp: bool,
    pub matched_gt: Option<usize>,
}

/// All matches of one class, sorted by score descending (ties by index),
/// plus the class's ground-truth count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMatches {
    pub dets: Vec<DetMatch>,
    pub n_gt: usize,
}

/// Match result keyed by class id. Classes appear when they have any ground
/// truth or any detection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub per_class: BTreeMap<usize, ClassMatches>,
}

fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

fn match_into(
    result: &mut MatchResult,
    image: usize,
    dets: &[Detection],
    gts: &[(BBox, usize)],
    iou_thresh: f64,
) -> Result<()> {
    for d in dets {
        if !d.score.is_finite() {
            return Err(Error::Numeric("non-finite detection score".into()));
        }
    }
    for (class_id, count) in gts.iter().fold(BTreeMap::new(), |mut m, (_, c)| {
        *m.entry(*c).or_insert(0usize) += 1;
        m
    }) {
        result.per_class.entry(class_id).or_default().n_gt += count;
    }

    let mut gt_used = vec![false; gts.len()];
    for &di in &rank_order(dets) {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gb, gc)) in gts.iter().enumerate() {
            if *gc != det.class_id || gt_used[gi] {
                continue;
            }
            let v = iou(&det.bbox, gb)?;
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        let entry = result.per_class.entry(det.class_id).or_default();
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                entry.dets.push(DetMatch {
                    score: det.score,
                    det_index: (image, di),
                    is_tp: true,
                    matched_gt: Some(gi),
                });
            }
            None => entry.dets.push(DetMatch {
                score: det.score,
                det_index: (image, di),
                is_tp: false,
                matched_gt: None,
            }),
        }
    }
    Ok(())
}

fn sort_matches(result: &mut MatchResult) {
    for cm in result.per_class.values_mut() {
        cm.dets.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.det_index.cmp(&b.det_index))
        });
    }
}

/// Greedily match detections against ground truths of the same class at the
/// given IoU threshold. Each ground truth is matched at most once.
pub fn match_detections(
    dets: &[Detection],
    gts: &[(BBox, usize)],
    iou_thresh: f64,
) -> Result<MatchResult> {
    let mut result = MatchResult::default();
    match_into(&mut result, 0, dets, gts, iou_thresh)?;
    sort_matches(&mut result);
    Ok(result)
}

/// One image's detections and ground truths for dataset-level evaluation.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub dets: Vec<Detection>,
    pub gts: Vec<(BBox, usize)>,
}

/// Per-image matching with global per-class pooling, detections ranked by
/// (score desc, image index, detection index).
pub fn match_dataset(images: &[ImageEval], iou_thresh: f64) -> Result<MatchResult> {
    let mut result = MatchResult::default();
    for (i, img) in images.iter().enumerate() {
        match_into(&mut result, i, &img.dets, &img.gts, iou_thresh)?;
    }
    sort_matches(&mut result);
    Ok(result)
}

/// All-point interpolated AP from ranked matches: the area under the
/// precision envelope, where each recall level takes the maximum precision
/// at or beyond it. Envelope computed by a single right-to-left pass.
fn ap_from_class(cm: &ClassMatches) -> Option<f64> {
    if cm.n_gt == 0 {
        return None;
    }
    if cm.dets.is_empty() {
        return Some(0.0);
    }
    let n = cm.dets.len();
    let mut recalls = Vec::with_capacity(n);
    let mut precisions = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for d in &cm.dets {
        if d.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recalls.push(tp as f64 / cm.n_gt as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }
    let mut envelope = precisions.clone();
    for k in (0..n - 1).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        if recalls[k] > prev_recall {
            ap += (recalls[k] - prev_recall) * envelope[k];
            prev_recall = recalls[k];
        }
    }
    Some(ap)
}

/// AP for one class; `None` when the class has no ground truths (such
/// classes are excluded from mAP, not scored zero).
pub fn average_precision(result: &MatchResult, class_id: usize) -> Option<f64> {
    result.per_class.get(&class_id).and_then(ap_from_class)
}

/// Independent AP oracle: explicit O(n^2) envelope scan, one max per rank.
pub fn average_precision_bruteforce(result: &MatchResult, class_id: usize) -> Option<f64> {
    let cm = result.per_class.get(&class_id)?;
    if cm.n_gt == 0 {
        return None;
    }
    if cm.dets.is_empty() {
        return Some(0.0);
    }
    let n = cm.dets.len();
    let mut points = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for d in &cm.dets {
        if d.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / cm.n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        let (r_k, _) = points[k];
        if r_k <= prev_recall {
            continue;
        }
        let env = points
            .iter()
            .filter(|(r, _)| *r >= r_k)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += (r_k - prev_recall) * env;
        prev_recall = r_k;
    }
    Some(ap)
}

fn mean_ap(result: &MatchResult) -> Result<f64> {
    let aps: Vec<f64> = result
        .per_class
        .keys()
        .filter_map(|&c| average_precision(result, c))
        .collect();
    if aps.is_empty() {
        return Err(Error::UndefinedMetric(
            "mAP requires at least one class with ground truths".into(),
        ));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean AP over classes with at least one ground truth, at one IoU threshold.
pub fn map_at_threshold(dets: &[Detection], gts: &[(BBox, usize)], iou_thresh: f64) -> Result<f64> {
    mean_ap(&match_detections(dets, gts, iou_thresh)?)
}

/// The ten COCO thresholds 0.50, 0.55, ..., 0.95, generated from integers so
/// boundary IoU values compare exactly.
pub fn coco_iou_thresholds() -> [f64; 10] {
    let mut t = [0.0; 10];
    for (i, v) in t.iter_mut().enumerate() {
        *v = (50 + 5 * i) as f64 / 100.0;
    }
    t
}

/// Mean of [`map_at_threshold`] over the ten COCO thresholds.
pub fn coco_style_map(dets: &[Detection], gts: &[(BBox, usize)]) -> Result<f64> {
    let thresholds = coco_iou_thresholds();
    let mut sum = 0.0;
    for t in thresholds {
        sum += map_at_threshold(dets, gts, t)?;
    }
    Ok(sum / thresholds.len() as f64)
}

/// Dataset-level summary.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEval {
    pub map50: f64,
    pub map5095: f64,
    /// Per-class AP at IoU 0.5 for classes with ground truths.
    pub per_class_ap50: BTreeMap<usize, f64>,
}

/// Evaluate a whole dataset: per-image matching, global PR curves.
pub fn evaluate_dataset(images: &[ImageEval]) -> Result<DatasetEval> {
    let at50 = match_dataset(images, 0.5)?;
    let map50 = mean_ap(&at50)?;
    let per_class_ap50 = at50
        .per_class
        .keys()
        .filter_map(|&c| average_precision(&at50, c).map(|ap| (c, ap)))
        .collect();
    let mut sum = 0.0;
    let thresholds = coco_iou_thresholds();
    for t in thresholds {
        sum += mean_ap(&match_dataset(images, t)?)?;
    }
    Ok(DatasetEval { map50, map5095: sum / thresholds.len() as f64, per_class_ap50 })
}
