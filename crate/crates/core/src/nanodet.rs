//! Desk-scale one-stage detector and its synthetic world.
//!
//! Scenes are grids of raw per-cell feature vectors: each planted object
//! writes a class-specific signature, scaled by the fraction of the object
//! inside the cell, into every cell whose center its box covers, plus
//! i.i.d. Gaussian noise. The detector is a shared two-layer dense backbone
//! producing one feature row per cell, with affine objectness / class / box
//! heads on top. The same feature rows feed the vision-language branch.

use crate::error::{Error, Result};
use crate::geometry::{Assignment, BBox, Detection};
use crate::losses::{DetectionTargets, PositiveTarget};
use crate::numerics::{
    affine, affine_backward, dot, l2_norm, relu, relu_backward, sigmoid, Matrix, ParamTensor,
};
use crate::seed::rng_from_seed;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Width of the backbone's hidden layer (raw -> hidden -> feature).
pub const BACKBONE_HIDDEN: usize = 64;

/// Object side lengths are drawn uniformly from this range, in cell widths.
pub const OBJECT_SIDE_RANGE: (f64, f64) = (0.75, 2.5);

/// Euclidean norm of every class signature. Keeps covered cells above the
/// default noise floor (noise vector norm ~ sigma * sqrt(raw_dim)) while the
/// largest objects stay genuinely ambiguous per cell.
pub const SIGNATURE_NORM: f64 = 4.0;

/// Placement attempts per object before giving up.
const PLACEMENT_RETRIES: usize = 64;

/// Exponent clamp when decoding log-size offsets, so decoded boxes stay
/// finite for any parameter state.
const DECODE_LOG_CLAMP: f64 = 20.0;

// ---------------------------------------------------------------------------
// Scene configuration and generation
// ---------------------------------------------------------------------------

/// The synthetic detection world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Canvas side in pixels; must be divisible by both grid sides.
    pub canvas_side: u32,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Raw per-cell channel count.
    pub raw_dim: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub noise_sigma: f64,
    /// Pairwise cosine between distinct class signatures.
    pub signature_overlap: f64,
    /// Seed fixing the class signatures; part of the world, not the draw.
    pub signature_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            canvas_side: 128,
            grid_h: 8,
            grid_w: 8,
            raw_dim: 16,
            num_classes: 8,
            objects_min: 1,
            objects_max: 4,
            noise_sigma: 0.3,
            signature_overlap: 0.4,
            signature_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 || self.canvas_side == 0 {
            return Err(Error::Config("grid and canvas must be nonzero".into()));
        }
        if !(self.canvas_side as usize).is_multiple_of(self.grid_w)
            || !(self.canvas_side as usize).is_multiple_of(self.grid_h)
        {
            return Err(Error::Config(format!(
                "canvas side {} not divisible by grid {}x{}",
                self.canvas_side, self.grid_h, self.grid_w
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} invalid", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.signature_overlap) {
            return Err(Error::Config(format!(
                "signature_overlap {} outside [0, 1]",
                self.signature_overlap
            )));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "objects range {}..{} is empty",
                self.objects_min, self.objects_max
            )));
        }
        let needed = if self.signature_overlap > 0.0 {
            self.num_classes + 1
        } else {
            self.num_classes
        };
        if self.raw_dim < needed {
            return Err(Error::Config(format!(
                "raw_dim {} too small for {} classes at overlap {} (need >= {needed})",
                self.raw_dim, self.num_classes, self.signature_overlap
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn cell_w(&self) -> f64 {
        self.canvas_side as f64 / self.grid_w as f64
    }

    pub fn cell_h(&self) -> f64 {
        self.canvas_side as f64 / self.grid_h as f64
    }
}

/// One generated scene: per-cell raw features plus ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub raw: Matrix,
    pub gts: Vec<(BBox, usize)>,
}

/// Class signature vectors with exact pairwise cosine `signature_overlap`:
/// an orthonormal frame `{u, e_0..e_{C-1}}` combined as
/// `sqrt(rho) * u + sqrt(1 - rho) * e_c`, scaled to [`SIGNATURE_NORM`].
pub fn class_signatures(config: &SceneConfig) -> Result<Matrix> {
    config.validate()?;
    let c = config.num_classes;
    let d = config.raw_dim;
    let rho = config.signature_overlap;
    let basis_count = if rho > 0.0 { c + 1 } else { c };

    let mut rng = rng_from_seed(config.signature_seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(basis_count);
    while basis.len() < basis_count {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let proj = dot(&v, b);
            for (x, &bv) in v.iter_mut().zip(b.iter()) {
                *x -= proj * bv;
            }
        }
        let norm = l2_norm(&v);
        if norm < 1e-6 {
            continue; // essentially impossible; redraw
        }
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }

    let (shared, class_axes) = if rho > 0.0 {
        (Some(&basis[0]), &basis[1..])
    } else {
        (None, &basis[..])
    };
    let mut sig = Matrix::zeros(c, d);
    for (ci, axis) in class_axes.iter().enumerate() {
        let row = sig.row_mut(ci);
        for (k, &a) in axis.iter().enumerate() {
            row[k] = (1.0 - rho).sqrt() * a;
        }
        if let Some(u) = shared {
            for (k, &uv) in u.iter().enumerate() {
                row[k] += rho.sqrt() * uv;
            }
        }
        for v in row.iter_mut() {
            *v *= SIGNATURE_NORM;
        }
    }
    Ok(sig)
}

/// Generate one scene deterministically from (config, seed).
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    let signatures = class_signatures(config)?;
    let mut rng = rng_from_seed(seed);
    let side = config.canvas_side as f64;
    let k = rng.random_range(config.objects_min..=config.objects_max);

    let mut gts = Vec::with_capacity(k);
    for obj in 0..k {
        let class_id = rng.random_range(0..config.num_classes);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            // square objects, centered on cell centers: a cell's own features
            // then determine the box, which is what a per-cell detector can
            // actually learn
            let s = rng.random_range(OBJECT_SIDE_RANGE.0..=OBJECT_SIDE_RANGE.1) * config.cell_w();
            if s > side {
                continue;
            }
            let col = rng.random_range(0..config.grid_w);
            let row = rng.random_range(0..config.grid_h);
            let cx = (col as f64 + 0.5) * config.cell_w();
            let cy = (row as f64 + 0.5) * config.cell_h();
            if cx - s / 2.0 < 0.0 || cx + s / 2.0 > side || cy - s / 2.0 < 0.0 || cy + s / 2.0 > side
            {
                continue;
            }
            placed = Some(BBox::new(cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0)?);
            break;
        }
        let bbox = placed.ok_or_else(|| {
            Error::Generation(format!(
                "object {obj} could not be placed after {PLACEMENT_RETRIES} attempts"
            ))
        })?;
        gts.push((bbox, class_id));
    }

    let mut raw = Matrix::zeros(config.cells(), config.raw_dim);
    for (bbox, class_id) in &gts {
        for cell in 0..config.cells() {
            let anchor = anchor_for_cell(cell, config)?;
            let (cx, cy) = anchor.center();
            if !bbox.contains_point(cx, cy) {
                continue;
            }
            // coverage = fraction of the object inside this cell; the
            // cell-fraction variant saturates at 1 for any object larger
            // than a cell, leaving object size unrecoverable from a single
            // cell's features
            let coverage = bbox.intersection_area(&anchor) / bbox.area();
            let row = raw.row_mut(cell);
            for (v, &s) in row.iter_mut().zip(signatures.row(*class_id).iter()) {
                *v += s * coverage;
            }
        }
    }
    if config.noise_sigma > 0.0 {
        for v in raw.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += z * config.noise_sigma;
        }
    }
    Ok(SyntheticScene { raw, gts })
}

/// The cell's own square: one cell-width side centered on the cell center.
pub fn anchor_for_cell(cell_index: usize, config: &SceneConfig) -> Result<BBox> {
    if cell_index >= config.cells() {
        return Err(Error::Config(format!(
            "cell index {cell_index} out of range for {} cells",
            config.cells()
        )));
    }
    let row = cell_index / config.grid_w;
    let col = cell_index % config.grid_w;
    BBox::new(
        col as f64 * config.cell_w(),
        row as f64 * config.cell_h(),
        (col + 1) as f64 * config.cell_w(),
        (row + 1) as f64 * config.cell_h(),
    )
}

/// All cell anchors, row-major.
pub fn anchors(config: &SceneConfig) -> Result<Vec<BBox>> {
    (0..config.cells()).map(|i| anchor_for_cell(i, config)).collect()
}

// ---------------------------------------------------------------------------
// Detector parameters and forward/backward
// ---------------------------------------------------------------------------

/// Learnable detector parameters: shared backbone plus three affine heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorParams {
    pub backbone_w1: ParamTensor,
    pub backbone_b1: ParamTensor,
    pub backbone_w2: ParamTensor,
    pub backbone_b2: ParamTensor,
    pub head_obj_w: ParamTensor,
    pub head_obj_b: ParamTensor,
    pub head_cls_w: ParamTensor,
    pub head_cls_b: ParamTensor,
    pub head_box_w: ParamTensor,
    pub head_box_b: ParamTensor,
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

impl DetectorParams {
    pub fn init(raw_dim: usize, feature_dim: usize, num_classes: usize, seed_backbone: u64, seed_heads: u64) -> Self {
        Self::init_with_hidden(raw_dim, BACKBONE_HIDDEN, feature_dim, num_classes, seed_backbone, seed_heads)
    }

    pub fn init_with_hidden(
        raw_dim: usize,
        hidden: usize,
        feature_dim: usize,
        num_classes: usize,
        seed_backbone: u64,
        seed_heads: u64,
    ) -> Self {
        let mut rng = rng_from_seed(seed_backbone);
        let w1 = gaussian(&mut rng, raw_dim, hidden, (2.0 / raw_dim as f64).sqrt());
        let w2 = gaussian(&mut rng, hidden, feature_dim, (2.0 / hidden as f64).sqrt());
        let mut rng = rng_from_seed(seed_heads);
        let wo = gaussian(&mut rng, feature_dim, 1, (1.0 / feature_dim as f64).sqrt());
        let wc = gaussian(&mut rng, feature_dim, num_classes, (1.0 / feature_dim as f64).sqrt());
        let wb = gaussian(&mut rng, feature_dim, 4, (1.0 / feature_dim as f64).sqrt());
        DetectorParams {
            backbone_w1: ParamTensor::new("backbone.w1", w1),
            backbone_b1: ParamTensor::new("backbone.b1", Matrix::zeros(1, hidden)),
            backbone_w2: ParamTensor::new("backbone.w2", w2),
            backbone_b2: ParamTensor::new("backbone.b2", Matrix::zeros(1, feature_dim)),
            head_obj_w: ParamTensor::new("head_obj.w", wo),
            head_obj_b: ParamTensor::new("head_obj.b", Matrix::zeros(1, 1)),
            head_cls_w: ParamTensor::new("head_cls.w", wc),
            head_cls_b: ParamTensor::new("head_cls.b", Matrix::zeros(1, num_classes)),
            head_box_w: ParamTensor::new("head_box.w", wb),
            head_box_b: ParamTensor::new("head_box.b", Matrix::zeros(1, 4)),
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.backbone_w1.value.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone_w2.value.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.head_cls_w.value.cols()
    }
}

/// Per-cell detector outputs; `features` is the shared representation handed
/// to both the detection heads and the vision-language branch.
#[derive(Debug, Clone)]
pub struct GridPrediction {
    pub features: Matrix,
    pub obj_logits: Vec<f64>,
    pub cls_logits: Matrix,
    pub box_offsets: Matrix,
}

/// Intermediates for [`detector_backward`].
#[derive(Debug, Clone)]
pub struct DetectorCache {
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    pub feature_pre: Matrix,
}

pub fn detector_forward(
    raw: &Matrix,
    params: &DetectorParams,
) -> Result<(GridPrediction, DetectorCache)> {
    let hidden_pre = affine(raw, &params.backbone_w1.value, params.backbone_b1.value.row(0))?;
    let hidden = relu(&hidden_pre)?;
    let feature_pre = affine(&hidden, &params.backbone_w2.value, params.backbone_b2.value.row(0))?;
    let features = relu(&feature_pre)?;

    let obj = affine(&features, &params.head_obj_w.value, params.head_obj_b.value.row(0))?;
    let cls_logits = affine(&features, &params.head_cls_w.value, params.head_cls_b.value.row(0))?;
    let box_offsets = affine(&features, &params.head_box_w.value, params.head_box_b.value.row(0))?;
    let obj_logits = (0..obj.rows()).map(|r| obj.get(r, 0)).collect();

    Ok((
        GridPrediction { features, obj_logits, cls_logits, box_offsets },
        DetectorCache { hidden_pre, hidden, feature_pre },
    ))
}

/// Backward through heads and backbone. `d_features_extra` carries the
/// vision-language branch's gradient into the shared feature rows.
#[allow(clippy::too_many_arguments)]
pub fn detector_backward(
    raw: &Matrix,
    cache: &DetectorCache,
    pred: &GridPrediction,
    params: &mut DetectorParams,
    d_obj: &[f64],
    d_cls: &Matrix,
    d_box: &Matrix,
    d_features_extra: Option<&Matrix>,
) -> Result<()> {
    let d_obj_m = Matrix::from_vec(d_obj.len(), 1, d_obj.to_vec())?;
    let f = &pred.features;

    let (mut d_f, dwo, dbo) = affine_backward(f, &params.head_obj_w.value, &d_obj_m)?;
    params.head_obj_w.grad.add_scaled(&dwo, 1.0)?;
    params.head_obj_b.grad.add_scaled(&Matrix::from_vec(1, 1, dbo)?, 1.0)?;

    let (d_f_cls, dwc, dbc) = affine_backward(f, &params.head_cls_w.value, d_cls)?;
    d_f.add_scaled(&d_f_cls, 1.0)?;
    params.head_cls_w.grad.add_scaled(&dwc, 1.0)?;
    params.head_cls_b.grad.add_scaled(&Matrix::from_vec(1, dbc.len(), dbc)?, 1.0)?;

    let (d_f_box, dwb, dbb) = affine_backward(f, &params.head_box_w.value, d_box)?;
    d_f.add_scaled(&d_f_box, 1.0)?;
    params.head_box_w.grad.add_scaled(&dwb, 1.0)?;
    params.head_box_b.grad.add_scaled(&Matrix::from_vec(1, dbb.len(), dbb)?, 1.0)?;

    if let Some(extra) = d_features_extra {
        d_f.add_scaled(extra, 1.0)?;
    }

    let d_feature_pre = relu_backward(&cache.feature_pre, &d_f)?;
    let (d_hidden, dw2, db2) = affine_backward(&cache.hidden, &params.backbone_w2.value, &d_feature_pre)?;
    params.backbone_w2.grad.add_scaled(&dw2, 1.0)?;
    params.backbone_b2.grad.add_scaled(&Matrix::from_vec(1, db2.len(), db2)?, 1.0)?;

    let d_hidden_pre = relu_backward(&cache.hidden_pre, &d_hidden)?;
    let (_d_raw, dw1, db1) = affine_backward(raw, &params.backbone_w1.value, &d_hidden_pre)?;
    params.backbone_w1.grad.add_scaled(&dw1, 1.0)?;
    params.backbone_b1.grad.add_scaled(&Matrix::from_vec(1, db1.len(), db1)?, 1.0)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Target encoding and decoding
// ---------------------------------------------------------------------------

/// Encode a ground-truth box against its anchor as (d_cx, d_cy, log w, log h).
pub fn encode_box_target(gt: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
    if gt.width() <= 0.0 || gt.height() <= 0.0 {
        return Err(Error::Geometry("zero-size ground truth box".into()));
    }
    let (gcx, gcy) = gt.center();
    let (acx, acy) = anchor.center();
    Ok([
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ])
}

/// Decode offsets back into a canvas-clipped box.
pub fn decode_box(offsets: &[f64], anchor: &BBox, canvas_side: f64) -> Result<BBox> {
    let (acx, acy) = anchor.center();
    let cx = acx + offsets[0] * anchor.width();
    let cy = acy + offsets[1] * anchor.height();
    let w = anchor.width() * offsets[2].clamp(-DECODE_LOG_CLAMP, DECODE_LOG_CLAMP).exp();
    let h = anchor.height() * offsets[3].clamp(-DECODE_LOG_CLAMP, DECODE_LOG_CLAMP).exp();
    let b = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)?;
    Ok(b.clip_to_canvas(canvas_side))
}

/// Supervision for the detector loss from forced-best-match assignments.
pub fn build_detection_targets(
    assignments: &[Assignment],
    gts: &[(BBox, usize)],
    config: &SceneConfig,
) -> Result<DetectionTargets> {
    let mut obj_targets = vec![0.0; config.cells()];
    let mut positives = Vec::new();
    for a in assignments {
        if !a.is_positive {
            continue;
        }
        let gi = a.matched_gt.ok_or_else(|| {
            Error::Config("positive assignment without a matched ground truth".into())
        })?;
        obj_targets[a.anchor_index] = 1.0;
        let anchor = anchor_for_cell(a.anchor_index, config)?;
        positives.push(PositiveTarget {
            cell: a.anchor_index,
            class_id: gts[gi].1,
            box_target: encode_box_target(&gts[gi].0, &anchor)?,
        });
    }
    Ok(DetectionTargets { obj_targets, positives })
}

/// Threshold on objectness, decode boxes, attach fused per-class scores,
/// keep the argmax class per cell, then per-class NMS at IoU 0.5.
pub fn decode_detections(
    pred: &GridPrediction,
    p_fused: &Matrix,
    obj_threshold: f64,
    config: &SceneConfig,
) -> Result<Vec<Detection>> {
    if p_fused.rows() != pred.obj_logits.len() || p_fused.cols() != config.num_classes {
        return Err(Error::Dimension(format!(
            "fused scores {:?} vs {} cells x {} classes",
            p_fused.shape(),
            pred.obj_logits.len(),
            config.num_classes
        )));
    }
    let mut dets = Vec::new();
    for cell in 0..pred.obj_logits.len() {
        let obj_p = sigmoid(pred.obj_logits[cell]);
        if obj_p < obj_threshold {
            continue;
        }
        let anchor = anchor_for_cell(cell, config)?;
        let bbox = decode_box(pred.box_offsets.row(cell), &anchor, config.canvas_side as f64)?;
        let scores: Vec<f64> = p_fused.row(cell).iter().map(|&p| obj_p * p).collect();
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        dets.push(Detection {
            bbox,
            class_id: best,
            score: scores[best],
            per_class_scores: Some(scores),
        });
    }
    crate::geometry::nms(&dets, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::loss_detection;
    use crate::numerics::finite_diff_check;

    #[test]
    fn scene_generation_is_deterministic() {
        let config = SceneConfig::default();
        let a = generate_scene(&config, 42).unwrap();
        let b = generate_scene(&config, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&config, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn object_count_stays_in_range_over_1000_seeds() {
        let config = SceneConfig::default();
        for seed in 0..1000 {
            let scene = generate_scene(&config, seed).unwrap();
            assert!((1..=4).contains(&scene.gts.len()), "seed {seed}");
            for (bbox, class_id) in &scene.gts {
                assert!(*class_id < config.num_classes);
                assert!(bbox.x_min >= 0.0 && bbox.x_max <= 128.0);
                assert!(bbox.y_min >= 0.0 && bbox.y_max <= 128.0);
            }
        }
    }

    #[test]
    fn noiseless_single_object_writes_exact_signature_multiples() {
        let config = SceneConfig {
            noise_sigma: 0.0,
            objects_min: 1,
            objects_max: 1,
            ..SceneConfig::default()
        };
        let sig = class_signatures(&config).unwrap();
        let scene = generate_scene(&config, 7).unwrap();
        let (bbox, class_id) = &scene.gts[0];
        assert_eq!(bbox.width(), bbox.height(), "objects are squares");
        for cell in 0..config.cells() {
            let anchor = anchor_for_cell(cell, &config).unwrap();
            let (cx, cy) = anchor.center();
            let row = scene.raw.row(cell);
            if bbox.contains_point(cx, cy) {
                let coverage = bbox.intersection_area(&anchor) / bbox.area();
                for (v, &s) in row.iter().zip(sig.row(*class_id).iter()) {
                    assert_eq!(*v, s * coverage);
                }
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn signatures_are_unit_norm_with_exact_overlap() {
        for overlap in [0.0, 0.4, 0.9] {
            let config = SceneConfig { signature_overlap: overlap, ..SceneConfig::default() };
            let sig = class_signatures(&config).unwrap();
            for a in 0..config.num_classes {
                assert!((l2_norm(sig.row(a)) - SIGNATURE_NORM).abs() < 1e-9);
                for b in 0..a {
                    let cos = dot(sig.row(a), sig.row(b))
                        / (l2_norm(sig.row(a)) * l2_norm(sig.row(b)));
                    assert!(
                        (cos - overlap).abs() < 1e-9,
                        "classes {a},{b}: cos {cos} vs {overlap}"
                    );
                }
            }
        }
    }

    #[test]
    fn config_validation_catches_bad_worlds() {
        let bad = SceneConfig { canvas_side: 100, ..SceneConfig::default() }; // 100 % 8 != 0
        assert!(bad.validate().is_err());
        let bad = SceneConfig { num_classes: 1, ..SceneConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SceneConfig { raw_dim: 8, ..SceneConfig::default() }; // needs 9 at overlap > 0
        assert!(bad.validate().is_err());
        let bad = SceneConfig { objects_min: 5, objects_max: 4, ..SceneConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn coarse_grids_place_objects_via_retries() {
        // 2x2 grid: cell width 64, so sides up to 160 > canvas get redrawn
        let config = SceneConfig {
            grid_h: 2,
            grid_w: 2,
            canvas_side: 128,
            ..SceneConfig::default()
        };
        for seed in 0..50 {
            let scene = generate_scene(&config, seed).unwrap();
            for (bbox, _) in &scene.gts {
                assert!(bbox.width() <= 128.0 && bbox.height() <= 128.0);
            }
        }
    }

    #[test]
    fn anchor_fixtures() {
        let config = SceneConfig::default();
        let a = anchor_for_cell(0, &config).unwrap();
        assert_eq!(a, BBox::new(0.0, 0.0, 16.0, 16.0).unwrap());

        // anchors tile the canvas without overlap
        let all = anchors(&config).unwrap();
        let total_area: f64 = all.iter().map(|b| b.area()).sum();
        assert_eq!(total_area, 128.0 * 128.0);
        for i in 0..all.len() {
            for j in 0..i {
                assert_eq!(all[i].intersection_area(&all[j]), 0.0);
            }
        }

        // centers strictly increase in row-major order
        for w in all.windows(2) {
            let (ax, ay) = w[0].center();
            let (bx, by) = w[1].center();
            assert!((by, bx) > (ay, ax));
        }

        assert!(anchor_for_cell(64, &config).is_err());
    }

    #[test]
    fn forward_zero_input_gives_zero_logits() {
        let params = DetectorParams::init_with_hidden(6, 8, 5, 3, 1, 2);
        let raw = Matrix::zeros(4, 6);
        let (pred, _) = detector_forward(&raw, &params).unwrap();
        assert_eq!(pred.features.rows(), 4);
        assert!(pred.obj_logits.iter().all(|&v| v == 0.0));
        assert!(pred.cls_logits.data().iter().all(|&v| v == 0.0));
        // objectness probability 0.5 per cell
        assert_eq!(sigmoid(pred.obj_logits[0]), 0.5);
    }

    #[test]
    fn forward_row_counts_match_cells() {
        let config = SceneConfig::default();
        let params = DetectorParams::init(config.raw_dim, 64, config.num_classes, 1, 2);
        let scene = generate_scene(&config, 3).unwrap();
        let (pred, _) = detector_forward(&scene.raw, &params).unwrap();
        assert_eq!(pred.features.rows(), config.cells());
        assert_eq!(pred.obj_logits.len(), config.cells());
        assert_eq!(pred.cls_logits.rows(), config.cells());
        assert_eq!(pred.box_offsets.rows(), config.cells());
    }

    #[test]
    fn heads_consume_the_same_feature_rows_they_report() {
        // the reported features reproduce every head output exactly
        let config = SceneConfig::default();
        let params = DetectorParams::init(config.raw_dim, 64, config.num_classes, 5, 6);
        let scene = generate_scene(&config, 9).unwrap();
        let (pred, _) = detector_forward(&scene.raw, &params).unwrap();
        let again = affine(&pred.features, &params.head_cls_w.value, params.head_cls_b.value.row(0)).unwrap();
        assert_eq!(again, pred.cls_logits);
        let obj = affine(&pred.features, &params.head_obj_w.value, params.head_obj_b.value.row(0)).unwrap();
        let obj_vec: Vec<f64> = (0..obj.rows()).map(|r| obj.get(r, 0)).collect();
        assert_eq!(obj_vec, pred.obj_logits);
    }

    #[test]
    fn encode_decode_roundtrip_and_fixtures() {
        let config = SceneConfig::default();
        let anchor = anchor_for_cell(9, &config).unwrap();

        // zero offsets decode to the anchor itself
        let b = decode_box(&[0.0; 4], &anchor, 128.0).unwrap();
        assert_eq!(b, anchor);

        // (0, 0, ln 2, 0) doubles the width only
        let b = decode_box(&[0.0, 0.0, 2.0_f64.ln(), 0.0], &anchor, 1e9).unwrap();
        assert!((b.width() - 32.0).abs() < 1e-9);
        assert!((b.height() - 16.0).abs() < 1e-9);

        // encode then decode reproduces the ground truth
        let gt = BBox::new(130.0, 40.0, 170.0, 90.0).unwrap();
        let anchor = BBox::new(128.0, 32.0, 160.0, 64.0).unwrap();
        let code = encode_box_target(&gt, &anchor).unwrap();
        let back = decode_box(&code, &anchor, 1e9).unwrap();
        for (a, b) in [back.x_min, back.y_min, back.x_max, back.y_max]
            .iter()
            .zip([gt.x_min, gt.y_min, gt.x_max, gt.y_max].iter())
        {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_detections_fixtures() {
        let config = SceneConfig::default();
        let cells = config.cells();
        let pred = GridPrediction {
            features: Matrix::zeros(cells, 4),
            obj_logits: vec![0.0; cells],
            cls_logits: Matrix::zeros(cells, config.num_classes),
            box_offsets: Matrix::zeros(cells, 4),
        };
        let uniform = Matrix::from_vec(
            cells,
            config.num_classes,
            vec![1.0 / config.num_classes as f64; cells * config.num_classes],
        )
        .unwrap();

        // threshold above 1 -> nothing survives
        let dets = decode_detections(&pred, &uniform, 1.0 + 1e-9, &config).unwrap();
        assert!(dets.is_empty());

        // zero offsets -> every kept box is its anchor
        let dets = decode_detections(&pred, &uniform, 0.4, &config).unwrap();
        for d in &dets {
            let anchor_found = anchors(&config).unwrap().contains(&d.bbox);
            assert!(anchor_found);
            let scores = d.per_class_scores.as_ref().unwrap();
            assert_eq!(d.score, scores[d.class_id]);
        }
    }

    #[test]
    fn decoded_boxes_stay_inside_canvas() {
        let config = SceneConfig::default();
        let mut rng = rng_from_seed(21);
        let cells = config.cells();
        let box_offsets = Matrix::from_vec(
            cells,
            4,
            (0..cells * 4).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let pred = GridPrediction {
            features: Matrix::zeros(cells, 4),
            obj_logits: vec![2.0; cells],
            cls_logits: Matrix::zeros(cells, config.num_classes),
            box_offsets,
        };
        let uniform = Matrix::from_vec(
            cells,
            config.num_classes,
            vec![1.0 / config.num_classes as f64; cells * config.num_classes],
        )
        .unwrap();
        for d in decode_detections(&pred, &uniform, 0.5, &config).unwrap() {
            assert!(d.bbox.x_min >= 0.0 && d.bbox.x_max <= 128.0);
            assert!(d.bbox.y_min >= 0.0 && d.bbox.y_max <= 128.0);
        }
    }

    #[test]
    fn detector_gradients_through_detection_loss_pass_finite_diff() {
        let config = SceneConfig {
            grid_h: 3,
            grid_w: 3,
            canvas_side: 48,
            raw_dim: 6,
            num_classes: 3,
            noise_sigma: 0.4,
            signature_overlap: 0.3,
            ..SceneConfig::default()
        };
        let params = DetectorParams::init_with_hidden(6, 7, 5, 3, 11, 12);
        let scene = generate_scene(&config, 13).unwrap();
        let cell_anchors = anchors(&config).unwrap();
        let assignments =
            crate::geometry::assign_positives(&cell_anchors, &scene.gts, 0.5, true).unwrap();
        let targets = build_detection_targets(&assignments, &scene.gts, &config).unwrap();

        // analytic gradients
        let mut p = params.clone();
        let (pred, cache) = detector_forward(&scene.raw, &p).unwrap();
        let (d_obj, d_cls, d_box) = crate::losses::loss_detection_backward(
            &pred.obj_logits,
            &pred.cls_logits,
            &pred.box_offsets,
            &targets,
            1.0,
        )
        .unwrap();
        detector_backward(&scene.raw, &cache, &pred, &mut p, &d_obj, &d_cls, &d_box, None)
            .unwrap();

        let mut tensors = vec![
            p.backbone_w1.clone(),
            p.backbone_b1.clone(),
            p.backbone_w2.clone(),
            p.backbone_b2.clone(),
            p.head_obj_w.clone(),
            p.head_obj_b.clone(),
            p.head_cls_w.clone(),
            p.head_cls_b.clone(),
            p.head_box_w.clone(),
            p.head_box_b.clone(),
        ];
        let raw = scene.raw.clone();
        let report = finite_diff_check(&mut tensors, 1e-6, |ts| {
            let p = DetectorParams {
                backbone_w1: ts[0].clone(),
                backbone_b1: ts[1].clone(),
                backbone_w2: ts[2].clone(),
                backbone_b2: ts[3].clone(),
                head_obj_w: ts[4].clone(),
                head_obj_b: ts[5].clone(),
                head_cls_w: ts[6].clone(),
                head_cls_b: ts[7].clone(),
                head_box_w: ts[8].clone(),
                head_box_b: ts[9].clone(),
            };
            let (pred, _) = detector_forward(&raw, &p)?;
            let l = loss_detection(&pred.obj_logits, &pred.cls_logits, &pred.box_offsets, &targets)?;
            Ok(l.total)
        })
        .unwrap();
        for pd in &report.params {
            assert!(
                pd.max_rel_error < 1e-4,
                "{}: rel error {:e}",
                pd.name,
                pd.max_rel_error
            );
        }
    }
}
