//! Training objectives: symmetric InfoNCE over positive samples, the
//! auxiliary cross-entropy term, the detector's own loss (objectness BCE +
//! class CE + smooth-L1 box regression), and the weighted composite total.
//!
//! Vision-language losses take the similarity matrix of positive rows only;
//! an empty positive set yields zero loss and zero gradient.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, sigmoid, softmax_rows, Matrix};
use crate::vlhead::SimilarityMatrix;
use serde::{Deserialize, Serialize};

/// Balancing weights of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cont: f64,
    pub lambda_aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cont: 0.5, lambda_aux: 0.8 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { lambda_cont: 0.0, lambda_aux: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cont.is_finite() && self.lambda_cont >= 0.0)
            || !(self.lambda_aux.is_finite() && self.lambda_aux >= 0.0)
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got ({}, {})",
                self.lambda_cont, self.lambda_aux
            )));
        }
        Ok(())
    }

    /// True when both vision-language terms vanish identically.
    pub fn vl_inactive(&self) -> bool {
        self.lambda_cont == 0.0 && self.lambda_aux == 0.0
    }
}

/// Per-step decomposition of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_cont: f64,
    pub l_aux: f64,
    pub l_total: f64,
    pub n_positives: usize,
}

/// `l_total = l_det + lambda_cont * l_cont + lambda_aux * l_aux`.
pub fn loss_total(
    l_det: f64,
    l_cont: f64,
    l_aux: f64,
    weights: &LossWeights,
    n_positives: usize,
) -> Result<LossBreakdown> {
    weights.validate()?;
    for (name, v) in [("l_det", l_det), ("l_cont", l_cont), ("l_aux", l_aux)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is non-finite: {v}")));
        }
    }
    Ok(LossBreakdown {
        l_det,
        l_cont,
        l_aux,
        l_total: l_det + weights.lambda_cont * l_cont + weights.lambda_aux * l_aux,
        n_positives,
    })
}

fn check_labels(sim: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != sim.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} similarity rows",
            labels.len(),
            sim.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= sim.cols()) {
        return Err(Error::Dimension(format!(
            "label {bad} out of range for {} classes",
            sim.cols()
        )));
    }
    sim.check_finite("similarity matrix")
}

/// Cross-entropy of row-softmaxed similarities against the labels,
/// `-(1/N) sum_i log softmax(s_i)[y_i]`, via stable log-sum-exp.
///
/// This single formula backs both the image-to-text InfoNCE component and
/// the auxiliary CE term; they enter the total with separate weights.
fn ce_over_rows(sim: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(sim, labels)?;
    let n = sim.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = sim.row(i);
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / n as f64)
}

/// Gradient of [`ce_over_rows`] w.r.t. the similarities, scaled by
/// `upstream`: `(softmax(s_i) - onehot(y_i)) * upstream / N`.
fn ce_over_rows_backward(sim: &Matrix, labels: &[usize], upstream: f64) -> Result<Matrix> {
    check_labels(sim, labels)?;
    let n = sim.rows();
    if n == 0 {
        return Ok(Matrix::zeros(0, sim.cols()));
    }
    let mut d = softmax_rows(sim)?;
    let scale = upstream / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = d.row_mut(i);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(d)
}

/// Image-to-text InfoNCE component: softmax over classes per sample.
pub fn loss_i2t(sim: &SimilarityMatrix, labels: &[usize]) -> Result<f64> {
    ce_over_rows(&sim.s, labels)
}

pub fn loss_i2t_backward(sim: &SimilarityMatrix, labels: &[usize], upstream: f64) -> Result<Matrix> {
    ce_over_rows_backward(&sim.s, labels, upstream)
}

/// Auxiliary cross-entropy term. As printed, the formula coincides with the
/// image-to-text component; it is kept as its own operation with its own
/// weight.
pub fn loss_aux(sim: &SimilarityMatrix, labels: &[usize]) -> Result<f64> {
    ce_over_rows(&sim.s, labels)
}

pub fn loss_aux_backward(sim: &SimilarityMatrix, labels: &[usize], upstream: f64) -> Result<Matrix> {
    ce_over_rows_backward(&sim.s, labels, upstream)
}

/// Text-to-image component: each sample is normalized over the batch column
/// of its own class, `-(1/N) sum_i log( exp(s[i][y_i]) / sum_j exp(s[j][y_i]) )`.
/// Classes absent from the batch contribute nothing.
pub fn loss_t2i(sim: &SimilarityMatrix, labels: &[usize]) -> Result<f64> {
    let s = &sim.s;
    check_labels(s, labels)?;
    let n = s.rows();
    if n == 0 {
        return Ok(0.0);
    }
    // column log-sum-exps, computed once per class present in the batch
    let mut col_lse = vec![None; s.cols()];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let lse = *col_lse[y].get_or_insert_with(|| {
            let col: Vec<f64> = (0..n).map(|j| s.get(j, y)).collect();
            log_sum_exp(&col)
        });
        total += lse - s.get(i, y);
    }
    Ok(total / n as f64)
}

pub fn loss_t2i_backward(sim: &SimilarityMatrix, labels: &[usize], upstream: f64) -> Result<Matrix> {
    let s = &sim.s;
    check_labels(s, labels)?;
    let n = s.rows();
    let mut d = Matrix::zeros(n, s.cols());
    if n == 0 {
        return Ok(d);
    }
    let scale = upstream / n as f64;
    // class multiplicities in the batch
    let mut counts = vec![0usize; s.cols()];
    for &y in labels {
        counts[y] += 1;
    }
    for (c, &m) in counts.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|j| s.get(j, c)).collect();
        let lse = log_sum_exp(&col);
        for (j, &v) in col.iter().enumerate() {
            let p = (v - lse).exp();
            d.set(j, c, scale * (m as f64) * p);
        }
    }
    for (i, &y) in labels.iter().enumerate() {
        d.set(i, y, d.get(i, y) - scale);
    }
    Ok(d)
}

/// Symmetric InfoNCE: `(loss_i2t + loss_t2i) / 2`, sign-corrected so that
/// minimizing it pulls matched pairs together.
pub fn loss_contrastive(sim: &SimilarityMatrix, labels: &[usize]) -> Result<f64> {
    Ok((loss_i2t(sim, labels)? + loss_t2i(sim, labels)?) / 2.0)
}

pub fn loss_contrastive_backward(
    sim: &SimilarityMatrix,
    labels: &[usize],
    upstream: f64,
) -> Result<Matrix> {
    let mut d = loss_i2t_backward(sim, labels, upstream / 2.0)?;
    d.add_scaled(&loss_t2i_backward(sim, labels, upstream / 2.0)?, 1.0)?;
    Ok(d)
}

// ---------------------------------------------------------------------------
// Detection loss
// ---------------------------------------------------------------------------

/// One positive cell's supervision: its class and encoded box target.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveTarget {
    pub cell: usize,
    pub class_id: usize,
    /// (d_cx, d_cy, log w, log h) relative to the cell anchor.
    pub box_target: [f64; 4],
}

/// Supervision for one scene's grid, built from forced-best-match
/// assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    /// 1.0 for positive cells, 0.0 elsewhere; length = number of cells.
    pub obj_targets: Vec<f64>,
    pub positives: Vec<PositiveTarget>,
}

/// Sub-terms of the detector loss, each averaged over its own support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLoss {
    /// Binary cross-entropy over all cells.
    pub objectness: f64,
    /// Cross-entropy over positive cells only.
    pub class: f64,
    /// Smooth-L1 over positive cells only.
    pub bbox: f64,
    pub total: f64,
}

fn smooth_l1(u: f64) -> f64 {
    let a = u.abs();
    if a < 1.0 {
        0.5 * u * u
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(u: f64) -> f64 {
    if u.abs() < 1.0 {
        u
    } else {
        u.signum()
    }
}

/// Numerically stable `BCE(logit z, target t) = max(z,0) - z t + ln(1+e^-|z|)`.
fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn check_pred_shapes(
    obj_logits: &[f64],
    cls_logits: &Matrix,
    box_offsets: &Matrix,
    targets: &DetectionTargets,
) -> Result<()> {
    let cells = targets.obj_targets.len();
    if obj_logits.len() != cells || cls_logits.rows() != cells || box_offsets.rows() != cells {
        return Err(Error::Dimension(format!(
            "prediction rows ({}, {}, {}) vs {} cells",
            obj_logits.len(),
            cls_logits.rows(),
            box_offsets.rows(),
            cells
        )));
    }
    if box_offsets.cols() != 4 {
        return Err(Error::Dimension("box offsets must have 4 columns".into()));
    }
    if !obj_logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite objectness logit".into()));
    }
    cls_logits.check_finite("class logits")?;
    box_offsets.check_finite("box offsets")?;
    for p in &targets.positives {
        if p.cell >= cells || p.class_id >= cls_logits.cols() {
            return Err(Error::Dimension(format!(
                "positive target (cell {}, class {}) out of range",
                p.cell, p.class_id
            )));
        }
    }
    Ok(())
}

/// Detector loss: objectness BCE over all cells, class CE and smooth-L1 box
/// regression over positive cells. A scene without positives contributes the
/// objectness term only.
pub fn loss_detection(
    obj_logits: &[f64],
    cls_logits: &Matrix,
    box_offsets: &Matrix,
    targets: &DetectionTargets,
) -> Result<DetectionLoss> {
    check_pred_shapes(obj_logits, cls_logits, box_offsets, targets)?;
    let cells = targets.obj_targets.len();

    let objectness = obj_logits
        .iter()
        .zip(targets.obj_targets.iter())
        .map(|(&z, &t)| bce_with_logit(z, t))
        .sum::<f64>()
        / cells as f64;

    let n_pos = targets.positives.len();
    let (class, bbox) = if n_pos == 0 {
        (0.0, 0.0)
    } else {
        let mut class = 0.0;
        let mut bbox = 0.0;
        for p in &targets.positives {
            let row = cls_logits.row(p.cell);
            class += log_sum_exp(row) - row[p.class_id];
            for (k, &t) in p.box_target.iter().enumerate() {
                bbox += smooth_l1(box_offsets.get(p.cell, k) - t);
            }
        }
        (class / n_pos as f64, bbox / n_pos as f64)
    };

    Ok(DetectionLoss { objectness, class, bbox, total: objectness + class + bbox })
}

/// Gradients of [`loss_detection`]'s total w.r.t. the three logit groups,
/// scaled by `upstream`.
pub fn loss_detection_backward(
    obj_logits: &[f64],
    cls_logits: &Matrix,
    box_offsets: &Matrix,
    targets: &DetectionTargets,
    upstream: f64,
) -> Result<(Vec<f64>, Matrix, Matrix)> {
    check_pred_shapes(obj_logits, cls_logits, box_offsets, targets)?;
    let cells = targets.obj_targets.len();

    let obj_scale = upstream / cells as f64;
    let d_obj: Vec<f64> = obj_logits
        .iter()
        .zip(targets.obj_targets.iter())
        .map(|(&z, &t)| (sigmoid(z) - t) * obj_scale)
        .collect();

    let mut d_cls = Matrix::zeros(cells, cls_logits.cols());
    let mut d_box = Matrix::zeros(cells, 4);
    let n_pos = targets.positives.len();
    if n_pos > 0 {
        let pos_scale = upstream / n_pos as f64;
        for p in &targets.positives {
            let row = cls_logits.row(p.cell);
            let lse = log_sum_exp(row);
            {
                let d_row = d_cls.row_mut(p.cell);
                for (c, &v) in row.iter().enumerate() {
                    d_row[c] += ((v - lse).exp() - if c == p.class_id { 1.0 } else { 0.0 })
                        * pos_scale;
                }
            }
            let d_row = d_box.row_mut(p.cell);
            for (k, &t) in p.box_target.iter().enumerate() {
                d_row[k] += smooth_l1_grad(box_offsets.get(p.cell, k) - t) * pos_scale;
            }
        }
    }
    Ok((d_obj, d_cls, d_box))
}
