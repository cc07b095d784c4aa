//! Axis-aligned box arithmetic, IoU, greedy NMS, and positive-sample
//! assignment under the IoU >= threshold rule.

use crate::error::{Error, Result};
use std::collections::BTreeSet;

/// Axis-aligned box in corner form on a virtual canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Geometry("non-finite box coordinate".into()));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::Geometry(format!(
                "box min above max: ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Clip to `[0, side] x [0, side]`.
    pub fn clip_to_canvas(&self, side: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, side),
            y_min: self.y_min.clamp(0.0, side),
            x_max: self.x_max.clamp(0.0, side),
            y_max: self.y_max.clamp(0.0, side),
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// A scored box prediction. When `per_class_scores` is present,
/// `score == per_class_scores[class_id]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub per_class_scores: Option<Vec<f64>>,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Self {
        Detection { bbox, class_id, score, per_class_scores: None }
    }
}

/// Greedy non-maximum suppression, applied independently per class.
///
/// Sort by score descending (ties broken by lower original index), keep the
/// top, drop every remaining same-class detection with IoU strictly above
/// `iou_threshold` against it, repeat. Output is sorted by score descending
/// with the same tie-break.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0 < iou_threshold && iou_threshold <= 1.0) {
        return Err(Error::Config(format!(
            "nms iou_threshold {iou_threshold} outside (0, 1]"
        )));
    }
    for d in dets {
        if !d.score.is_finite() {
            return Err(Error::Numeric("non-finite detection score".into()));
        }
        d.bbox.validate()?;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i].clone());
        for &j in &order[pos + 1..] {
            if suppressed[j] || dets[j].class_id != dets[i].class_id {
                continue;
            }
            if iou(&dets[i].bbox, &dets[j].bbox)? > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Anchor-to-ground-truth assignment outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub anchor_index: usize,
    pub matched_gt: Option<usize>,
    pub iou: f64,
    pub is_positive: bool,
    /// True when positivity comes from the best-match promotion rather than
    /// the IoU threshold rule.
    pub is_forced: bool,
}

/// Assign anchors against ground truths.
///
/// An anchor is positive iff its max IoU over ground truths reaches
/// `threshold`; it matches the argmax ground truth (ties to the lowest gt
/// index). With `force_best_match`, each ground truth additionally promotes
/// its single highest-IoU anchor (ties to the lowest anchor index), flagged
/// as forced. Empty ground truths yield all-negative assignments.
pub fn assign_positives(
    anchors: &[BBox],
    gts: &[(BBox, usize)],
    threshold: f64,
    force_best_match: bool,
) -> Result<Vec<Assignment>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Config(format!(
            "assignment threshold {threshold} outside (0, 1)"
        )));
    }
    let mut out = Vec::with_capacity(anchors.len());
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best_iou = 0.0;
        let mut best_gt = None;
        for (gi, (gb, _)) in gts.iter().enumerate() {
            let v = iou(anchor, gb)?;
            if v > best_iou {
                best_iou = v;
                best_gt = Some(gi);
            }
        }
        let is_positive = best_iou >= threshold && best_gt.is_some();
        out.push(Assignment {
            anchor_index: ai,
            matched_gt: if is_positive { best_gt } else { None },
            iou: best_iou,
            is_positive,
            is_forced: false,
        });
    }
    if force_best_match {
        for (gi, (gb, _)) in gts.iter().enumerate() {
            let mut best_iou = f64::NEG_INFINITY;
            let mut best_anchor = None;
            for (ai, anchor) in anchors.iter().enumerate() {
                let v = iou(anchor, gb)?;
                if v > best_iou {
                    best_iou = v;
                    best_anchor = Some(ai);
                }
            }
            if let Some(ai) = best_anchor {
                if !out[ai].is_positive {
                    out[ai].is_positive = true;
                    out[ai].matched_gt = Some(gi);
                    out[ai].iou = best_iou;
                    out[ai].is_forced = true;
                }
            }
        }
    }
    Ok(out)
}

/// Indices of positive anchors, in anchor order.
pub fn positive_indices(assignments: &[Assignment]) -> Vec<usize> {
    assignments
        .iter()
        .filter(|a| a.is_positive)
        .map(|a| a.anchor_index)
        .collect()
}

/// Brute-force greedy NMS oracle: repeated max scan, no sort. Kept for
/// oracle equivalence testing against [`nms`].
pub fn nms_bruteforce(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    let mut remaining: BTreeSet<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        // highest score, ties to lowest original index
        let mut best = *remaining.iter().next().unwrap();
        for &i in &remaining {
            if dets[i].score > dets[best].score {
                best = i;
            }
        }
        kept.push(dets[best].clone());
        remaining.remove(&best);
        let drop: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&j| dets[j].class_id == dets[best].class_id)
            .filter(|&j| iou(&dets[best].bbox, &dets[j].bbox).unwrap() > iou_threshold)
            .collect();
        for j in drop {
            remaining.remove(&j);
        }
    }
    Ok(kept)
}
