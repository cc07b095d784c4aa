//! Deterministic joint training: every learnable group — backbone, detection
//! heads, projection MLP, text embeddings, temperatures — is updated in every
//! step by SGD with momentum under a step learning-rate schedule.
//!
//! The vision-language batch is the union of positive cells across the
//! step's scenes. When both VL weights are zero the branch is skipped
//! structurally, so a zero-weight run is bit-identical to a build without
//! the branch.

use crate::error::{Error, Result};
use crate::evalmap::{evaluate_dataset, DatasetEval, ImageEval};
use crate::geometry::assign_positives;
use crate::losses::{
    loss_aux, loss_aux_backward, loss_contrastive, loss_contrastive_backward, loss_detection,
    loss_detection_backward, loss_total, LossBreakdown, LossWeights,
};
use crate::nanodet::{
    anchors, build_detection_targets, decode_detections, detector_forward, generate_scene,
    DetectorCache, DetectorParams, GridPrediction, SceneConfig, SyntheticScene,
};
use crate::numerics::{finite_diff_check, softmax_rows, Matrix, ParamTensor};
use crate::seed::{derive_seed, rng_from_seed, stream};
use crate::vlhead::{
    clip_probs, default_class_names, fuse_scores, similarity, similarity_backward, visual_embed,
    visual_embed_backward, visual_embed_with_cache, ProjectionHeadParams, TemperatureVector,
    TextEmbeddingTable, VlHeadConfig,
};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimization step.
    pub batch_size: usize,
    /// Base learning rate before the toy-problem scale factor.
    pub lr: f64,
    /// Multiplier applied to `lr` for the desk-scale problem.
    pub lr_scale: f64,
    pub momentum: f64,
    /// Applied to weight matrices only (not biases, embeddings, temperatures).
    pub weight_decay: f64,
    /// Learning rate decays by `lr_gamma` every `lr_step_epochs` epochs.
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub weights: LossWeights,
    /// Score-fusion weight used for validation evaluation.
    pub alpha: f64,
    /// IoU threshold for positive assignment.
    pub iou_positive: f64,
    pub seed: u64,
    /// Run validation mAP every this many epochs (always on the final epoch).
    pub eval_every: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Objectness threshold when decoding for evaluation.
    pub eval_obj_threshold: f64,
    /// Structurally remove the vision-language branch. Requires zero VL
    /// weights; zero weights also take this path automatically.
    pub vl_branch: bool,
    pub scene: SceneConfig,
    pub vlhead: VlHeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 0.005,
            // eff. lr 0.01: larger scales destabilize the joint run once the
            // contrastive branch's early transient hits the shared backbone
            lr_scale: 2.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_step_epochs: 6,
            lr_gamma: 0.1,
            weights: LossWeights::default(),
            alpha: 0.7,
            iou_positive: 0.5,
            seed: 0,
            eval_every: 5,
            train_scenes: 800,
            val_scenes: 200,
            eval_obj_threshold: 0.05,
            vl_branch: true,
            scene: SceneConfig::default(),
            vlhead: VlHeadConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.vlhead.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_scale > 0.0) {
            return Err(Error::Config(format!("lr {} * scale {} invalid", self.lr, self.lr_scale)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} invalid", self.weight_decay)));
        }
        if self.lr_step_epochs == 0 {
            return Err(Error::Config("lr_step_epochs must be at least 1".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::Config(format!("lr_gamma {} outside (0, 1]", self.lr_gamma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0 < self.iou_positive && self.iou_positive < 1.0) {
            return Err(Error::Config(format!(
                "iou_positive {} outside (0, 1)",
                self.iou_positive
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_obj_threshold) {
            return Err(Error::Config(format!(
                "eval_obj_threshold {} outside [0, 1]",
                self.eval_obj_threshold
            )));
        }
        if !self.vl_branch && !self.weights.vl_inactive() {
            return Err(Error::Config(
                "vl_branch = false requires lambda_cont = lambda_aux = 0".into(),
            ));
        }
        Ok(())
    }

    /// True when the VL branch participates in this run.
    pub fn vl_active(&self) -> bool {
        self.vl_branch && !self.weights.vl_inactive()
    }

    /// Effective learning rate for a 0-based epoch under the step schedule.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_scale * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
    }

    /// "joint" when the VL branch trains, "ce-baseline" otherwise.
    pub fn mode(&self) -> &'static str {
        if self.vl_active() {
            "joint"
        } else {
            "ce-baseline"
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Every learnable parameter of the joint system.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub detector: DetectorParams,
    pub projection: ProjectionHeadParams,
    pub text: TextEmbeddingTable,
    pub temps: TemperatureVector,
}

impl JointModel {
    /// Initialize from independent per-group seed streams so that skipping
    /// one group never shifts another's draws.
    pub fn init(config: &TrainConfig, text: Option<TextEmbeddingTable>) -> Result<Self> {
        config.validate()?;
        let vl = &config.vlhead;
        let detector = DetectorParams::init(
            config.scene.raw_dim,
            vl.feature_dim,
            config.scene.num_classes,
            derive_seed(config.seed, stream::BACKBONE, 0),
            derive_seed(config.seed, stream::HEADS, 0),
        );
        let projection = ProjectionHeadParams::init(
            vl.feature_dim,
            vl.hidden_dim,
            vl.embed_dim,
            derive_seed(config.seed, stream::PROJECTION, 0),
        );
        let text = match text {
            Some(t) => {
                if t.num_classes() != config.scene.num_classes {
                    return Err(Error::Format(format!(
                        "imported table has {} classes, config expects {}",
                        t.num_classes(),
                        config.scene.num_classes
                    )));
                }
                if t.dim() != vl.embed_dim {
                    return Err(Error::Format(format!(
                        "imported table dim {} does not match embed_dim {}",
                        t.dim(),
                        vl.embed_dim
                    )));
                }
                t
            }
            None => TextEmbeddingTable::seeded(
                default_class_names(config.scene.num_classes),
                vl.embed_dim,
                derive_seed(config.seed, stream::TEXT_EMBEDDINGS, 0),
            )?,
        };
        let temps = TemperatureVector::bounded(config.scene.num_classes, vl.tau_init, vl.tau_min, vl.tau_max)?;
        Ok(JointModel { detector, projection, text, temps })
    }

    /// All parameters with their weight-decay eligibility, in update order.
    /// `include_vl = false` restricts to the detector groups.
    pub fn params_mut(&mut self, include_vl: bool) -> Vec<(&mut ParamTensor, bool)> {
        let d = &mut self.detector;
        let mut v: Vec<(&mut ParamTensor, bool)> = vec![
            (&mut d.backbone_w1, true),
            (&mut d.backbone_b1, false),
            (&mut d.backbone_w2, true),
            (&mut d.backbone_b2, false),
            (&mut d.head_obj_w, true),
            (&mut d.head_obj_b, false),
            (&mut d.head_cls_w, true),
            (&mut d.head_cls_b, false),
            (&mut d.head_box_w, true),
            (&mut d.head_box_b, false),
        ];
        if include_vl {
            let p = &mut self.projection;
            v.push((&mut p.w1, true));
            v.push((&mut p.b1, false));
            v.push((&mut p.w2, true));
            v.push((&mut p.b2, false));
            v.push((&mut self.text.embeddings, false));
            v.push((&mut self.temps.tau, false));
        }
        v
    }

    pub fn zero_grads(&mut self, include_vl: bool) {
        for (p, _) in self.params_mut(include_vl) {
            p.zero_grad();
        }
    }

    /// Clone every parameter tensor (value + current gradient) in a fixed
    /// order, for checkpointing and finite-difference sweeps.
    pub fn flatten(&mut self) -> Vec<ParamTensor> {
        self.params_mut(true).into_iter().map(|(p, _)| p.clone()).collect()
    }

    /// Copy values back from a flat list produced by [`JointModel::flatten`].
    pub fn assign_values(&mut self, tensors: &[ParamTensor]) -> Result<()> {
        let params = self.params_mut(true);
        if params.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                params.len(),
                tensors.len()
            )));
        }
        for ((p, _), t) in params.into_iter().zip(tensors.iter()) {
            if p.name != t.name || p.value.shape() != t.value.shape() {
                return Err(Error::Format(format!(
                    "tensor mismatch: {} {:?} vs {} {:?}",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
            p.value = t.value.clone();
        }
        Ok(())
    }
}

/// Parameter-group label used in gradient-check reports.
pub fn group_of(param_name: &str) -> &'static str {
    if param_name.starts_with("backbone.") {
        "backbone"
    } else if param_name.starts_with("head_") {
        "heads"
    } else if param_name.starts_with("proj.") {
        "projection"
    } else if param_name == "text_embeddings" {
        "text_embeddings"
    } else {
        "temperatures"
    }
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// SGD with momentum; weight decay only where flagged.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: BTreeMap<String, Matrix>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum { momentum, weight_decay, velocities: BTreeMap::new() }
    }

    /// `v = mu v + (g + wd w); w -= lr v`
    pub fn step(&mut self, lr: f64, params: Vec<(&mut ParamTensor, bool)>) -> Result<()> {
        let momentum = self.momentum;
        for (p, decay) in params {
            let v = self
                .velocities
                .entry(p.name.clone())
                .or_insert_with(|| Matrix::zeros(p.value.rows(), p.value.cols()));
            if v.shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "velocity shape {:?} vs parameter {} shape {:?}",
                    v.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let wd = if decay { self.weight_decay } else { 0.0 };
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (i, vi) in v.data_mut().iter_mut().enumerate() {
                *vi = momentum * *vi + grad[i] + wd * value[i];
                value[i] -= lr * *vi;
            }
        }
        Ok(())
    }

    pub fn velocities(&self) -> &BTreeMap<String, Matrix> {
        &self.velocities
    }

    pub fn restore_velocities(&mut self, velocities: BTreeMap<String, Matrix>) {
        self.velocities = velocities;
    }
}

// ---------------------------------------------------------------------------
// One optimization step
// ---------------------------------------------------------------------------

struct SceneForward {
    pred: GridPrediction,
    cache: DetectorCache,
    targets: crate::losses::DetectionTargets,
    d_features_extra: Option<Matrix>,
}

pub(crate) struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub clip_correct: usize,
    pub clip_total: usize,
}

/// Forward + backward over one batch: detection loss per scene (averaged),
/// VL losses over the pooled positive rows. Gradients accumulate into the
/// model; no parameters move here.
pub(crate) fn compute_grads(
    model: &mut JointModel,
    batch: &[&SyntheticScene],
    config: &TrainConfig,
    vl_active: bool,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let scene_cfg = &config.scene;
    let cell_anchors = anchors(scene_cfg)?;
    let inv_b = 1.0 / batch.len() as f64;

    model.zero_grads(true);

    let mut fwds: Vec<SceneForward> = Vec::with_capacity(batch.len());
    let mut vl_rows: Vec<(usize, usize)> = Vec::new();
    let mut vl_labels: Vec<usize> = Vec::new();
    let mut l_det_sum = 0.0;

    for (si, scene) in batch.iter().enumerate() {
        let (pred, cache) = detector_forward(&scene.raw, &model.detector)?;
        let det_assign = assign_positives(&cell_anchors, &scene.gts, config.iou_positive, true)?;
        let targets = build_detection_targets(&det_assign, &scene.gts, scene_cfg)?;
        let det_loss =
            loss_detection(&pred.obj_logits, &pred.cls_logits, &pred.box_offsets, &targets)?;
        l_det_sum += det_loss.total;

        if vl_active {
            // the VL gate uses the pure IoU rule, without best-match promotion
            let vl_assign =
                assign_positives(&cell_anchors, &scene.gts, config.iou_positive, false)?;
            for a in &vl_assign {
                if a.is_positive {
                    vl_rows.push((si, a.anchor_index));
                    vl_labels.push(scene.gts[a.matched_gt.expect("positive has a match")].1);
                }
            }
        }
        fwds.push(SceneForward { pred, cache, targets, d_features_extra: None });
    }
    let l_det = l_det_sum * inv_b;

    let mut l_cont = 0.0;
    let mut l_aux = 0.0;
    let mut clip_correct = 0;
    let n_pos = vl_rows.len();
    if vl_active && n_pos > 0 {
        // the VL branch reads the same feature rows the heads consumed
        let rows: Vec<Vec<f64>> = vl_rows
            .iter()
            .map(|&(si, cell)| fwds[si].pred.features.row(cell).to_vec())
            .collect();
        let f_vl = Matrix::from_rows(&rows)?;
        let (vhat, cache) = visual_embed_with_cache(&f_vl, &model.projection)?;
        let sim = similarity(&vhat, &model.text, &model.temps)?;
        l_cont = loss_contrastive(&sim, &vl_labels)?;
        l_aux = loss_aux(&sim, &vl_labels)?;

        for (i, &y) in vl_labels.iter().enumerate() {
            let row = sim.s.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == y {
                clip_correct += 1;
            }
        }

        let mut d_sim = loss_contrastive_backward(&sim, &vl_labels, config.weights.lambda_cont)?;
        d_sim.add_scaled(&loss_aux_backward(&sim, &vl_labels, config.weights.lambda_aux)?, 1.0)?;
        let d_vhat = similarity_backward(&vhat, &mut model.text, &mut model.temps, &sim, &d_sim)?;
        let d_fvl = visual_embed_backward(&f_vl, &cache, &vhat, &mut model.projection, &d_vhat)?;

        let feature_dim = model.projection.feature_dim();
        for (k, &(si, cell)) in vl_rows.iter().enumerate() {
            let extra = fwds[si]
                .d_features_extra
                .get_or_insert_with(|| Matrix::zeros(scene_cfg.cells(), feature_dim));
            for (dst, &src) in extra.row_mut(cell).iter_mut().zip(d_fvl.row(k).iter()) {
                *dst += src;
            }
        }
    }

    for (scene, fwd) in batch.iter().zip(fwds.iter()) {
        let (d_obj, d_cls, d_box) = loss_detection_backward(
            &fwd.pred.obj_logits,
            &fwd.pred.cls_logits,
            &fwd.pred.box_offsets,
            &fwd.targets,
            inv_b,
        )?;
        crate::nanodet::detector_backward(
            &scene.raw,
            &fwd.cache,
            &fwd.pred,
            &mut model.detector,
            &d_obj,
            &d_cls,
            &d_box,
            fwd.d_features_extra.as_ref(),
        )?;
    }

    let breakdown = loss_total(l_det, l_cont, l_aux, &config.weights, n_pos)?;
    Ok(StepOutcome { breakdown, clip_correct, clip_total: n_pos })
}

// ---------------------------------------------------------------------------
// Metrics and checkpoints
// ---------------------------------------------------------------------------

/// Averages over one epoch's steps, plus validation metrics when evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_l_det: f64,
    pub mean_l_cont: f64,
    pub mean_l_aux: f64,
    pub mean_l_total: f64,
    /// VL positives seen this epoch.
    pub n_positives: usize,
    /// Top-1 accuracy of the similarity argmax on positives; absent when the
    /// VL branch is inactive or no positives occurred.
    pub clip_top1: Option<f64>,
    pub map50: Option<f64>,
    pub map5095: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub mode: String,
    pub records: Vec<EpochRecord>,
}

/// A named value array in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedArray {
    fn of(name: &str, m: &Matrix) -> Self {
        NamedArray {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, self.data.clone())
    }
}

/// Everything needed to resume training bit-for-bit: parameter values,
/// momentum buffers, step count, config echo, and metrics so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub class_names: Vec<String>,
    pub params: Vec<NamedArray>,
    pub momenta: Vec<NamedArray>,
    pub config: TrainConfig,
    pub metrics: MetricsHistory,
}

impl Checkpoint {
    pub fn capture(
        model: &mut JointModel,
        opt: &SgdMomentum,
        step: u64,
        config: &TrainConfig,
        metrics: &MetricsHistory,
    ) -> Self {
        let params = model
            .params_mut(true)
            .into_iter()
            .map(|(p, _)| NamedArray::of(&p.name, &p.value))
            .collect();
        let momenta = opt
            .velocities()
            .iter()
            .map(|(name, m)| NamedArray::of(name, m))
            .collect();
        Checkpoint {
            step,
            class_names: model.text.class_names.clone(),
            params,
            momenta,
            config: config.clone(),
            metrics: metrics.clone(),
        }
    }

    /// Rebuild the model this checkpoint captured.
    pub fn restore_model(&self) -> Result<JointModel> {
        let mut model = JointModel::init(&self.config, None)?;
        model.text.class_names = self.class_names.clone();
        let mut by_name: BTreeMap<&str, &NamedArray> =
            self.params.iter().map(|a| (a.name.as_str(), a)).collect();
        for (p, _) in model.params_mut(true) {
            let arr = by_name.remove(p.name.as_str()).ok_or_else(|| {
                Error::Format(format!("checkpoint missing parameter {}", p.name))
            })?;
            let m = arr.to_matrix()?;
            if m.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    m.shape(),
                    p.value.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {} contains non-finite values",
                    p.name
                )));
            }
            p.value = m;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(model)
    }

    fn restore_velocities(&self) -> Result<BTreeMap<String, Matrix>> {
        self.momenta
            .iter()
            .map(|a| Ok((a.name.clone(), a.to_matrix()?)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: MetricsHistory,
}

/// Owns the model, optimizer state, and step counter of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: JointModel,
    opt: SgdMomentum,
    step: u64,
    metrics: MetricsHistory,
}

impl Trainer {
    pub fn new(config: TrainConfig, text: Option<TextEmbeddingTable>) -> Result<Self> {
        config.validate()?;
        let model = JointModel::init(&config, text)?;
        let opt = SgdMomentum::new(config.momentum, config.weight_decay);
        let metrics = MetricsHistory { mode: config.mode().to_string(), records: Vec::new() };
        Ok(Trainer { config, model, opt, step: 0, metrics })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ckpt.restore_model()?;
        let mut opt = SgdMomentum::new(ckpt.config.momentum, ckpt.config.weight_decay);
        opt.restore_velocities(ckpt.restore_velocities()?);
        Ok(Trainer {
            config: ckpt.config.clone(),
            model,
            opt,
            step: ckpt.step,
            metrics: ckpt.metrics.clone(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimization step over a batch of scenes.
    pub fn step_batch(&mut self, batch: &[&SyntheticScene], lr: f64) -> Result<LossBreakdown> {
        self.step_batch_tracked(batch, lr).map(|o| o.breakdown)
    }

    fn step_batch_tracked(
        &mut self,
        batch: &[&SyntheticScene],
        lr: f64,
    ) -> Result<StepOutcome> {
        let vl_active = self.config.vl_active();
        let outcome = compute_grads(&mut self.model, batch, &self.config, vl_active)?;
        self.opt.step(lr, self.model.params_mut(vl_active))?;
        self.model.temps.clamp();
        self.step += 1;
        Ok(outcome)
    }

    /// Run the configured number of epochs over the given data.
    pub fn run(
        &mut self,
        train_scenes: &[SyntheticScene],
        val_scenes: &[SyntheticScene],
    ) -> Result<TrainOutput> {
        if train_scenes.is_empty() && self.config.epochs > 0 {
            return Err(Error::Config("no training scenes".into()));
        }
        for epoch in 0..self.config.epochs {
            let lr = self.config.lr_at_epoch(epoch);
            let mut order: Vec<usize> = (0..train_scenes.len()).collect();
            let mut rng =
                rng_from_seed(derive_seed(self.config.seed, stream::SHUFFLE, epoch as u64));
            order.shuffle(&mut rng);

            let mut sums = (0.0, 0.0, 0.0, 0.0);
            let mut n_positives = 0;
            let mut clip_correct = 0;
            let mut clip_total = 0;
            let mut n_steps = 0usize;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&SyntheticScene> = chunk.iter().map(|&i| &train_scenes[i]).collect();
                let outcome = self.step_batch_tracked(&batch, lr).map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "aborting at step {}: {msg}",
                        self.step + 1
                    )),
                    other => other,
                })?;
                sums.0 += outcome.breakdown.l_det;
                sums.1 += outcome.breakdown.l_cont;
                sums.2 += outcome.breakdown.l_aux;
                sums.3 += outcome.breakdown.l_total;
                n_positives += outcome.breakdown.n_positives;
                clip_correct += outcome.clip_correct;
                clip_total += outcome.clip_total;
                n_steps += 1;
            }

            let is_last = epoch + 1 == self.config.epochs;
            let evaluate = !val_scenes.is_empty()
                && ((epoch + 1) % self.config.eval_every == 0 || is_last);
            let (map50, map5095) = if evaluate {
                let eval = evaluate_model(
                    &self.model,
                    val_scenes,
                    &self.config.scene,
                    self.config.alpha,
                    self.config.eval_obj_threshold,
                )?;
                (Some(eval.map50), Some(eval.map5095))
            } else {
                (None, None)
            };

            let denom = n_steps.max(1) as f64;
            self.metrics.records.push(EpochRecord {
                epoch: epoch + 1,
                lr,
                mean_l_det: sums.0 / denom,
                mean_l_cont: sums.1 / denom,
                mean_l_aux: sums.2 / denom,
                mean_l_total: sums.3 / denom,
                n_positives,
                clip_top1: if self.config.vl_active() && clip_total > 0 {
                    Some(clip_correct as f64 / clip_total as f64)
                } else {
                    None
                },
                map50,
                map5095,
            });
        }
        let metrics = self.metrics.clone();
        let checkpoint =
            Checkpoint::capture(&mut self.model, &self.opt, self.step, &self.config, &metrics);
        Ok(TrainOutput { checkpoint, metrics })
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        let metrics = self.metrics.clone();
        Checkpoint::capture(&mut self.model, &self.opt, self.step, &self.config, &metrics)
    }
}

/// Generate `count` scenes from a master seed and stream id.
pub fn generate_dataset(
    config: &SceneConfig,
    master_seed: u64,
    stream_id: u64,
    count: usize,
) -> Result<Vec<SyntheticScene>> {
    (0..count)
        .map(|i| generate_scene(config, derive_seed(master_seed, stream_id, i as u64)))
        .collect()
}

/// Train end to end, generating train and validation data from the config.
pub fn train(config: &TrainConfig) -> Result<TrainOutput> {
    train_with(config, None)
}

/// Train with an optional imported text-embedding table.
pub fn train_with(config: &TrainConfig, text: Option<TextEmbeddingTable>) -> Result<TrainOutput> {
    config.validate()?;
    let train_scenes =
        generate_dataset(&config.scene, config.seed, stream::TRAIN_SCENES, config.train_scenes)?;
    let val_scenes =
        generate_dataset(&config.scene, config.seed, stream::VAL_SCENES, config.val_scenes)?;
    let mut trainer = Trainer::new(config.clone(), text)?;
    trainer.run(&train_scenes, &val_scenes)
}

/// Train on supplied scenes (e.g. loaded from a dataset file).
pub fn train_on(
    config: &TrainConfig,
    train_scenes: &[SyntheticScene],
    val_scenes: &[SyntheticScene],
    text: Option<TextEmbeddingTable>,
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(config.clone(), text)?;
    trainer.run(train_scenes, val_scenes)
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

/// Full inference for one scene: detector forward, CE and CLIP-branch
/// probabilities, fusion at `alpha`, decode, per-class NMS on fused scores.
/// At `alpha = 1` the VL branch is not evaluated at all.
pub fn predict_scene(
    model: &JointModel,
    raw: &Matrix,
    scene_cfg: &SceneConfig,
    alpha: f64,
    obj_threshold: f64,
) -> Result<Vec<crate::geometry::Detection>> {
    let (pred, _) = detector_forward(raw, &model.detector)?;
    let p_ce = softmax_rows(&pred.cls_logits)?;
    let fused = if alpha == 1.0 {
        p_ce
    } else {
        let vhat = visual_embed(&pred.features, &model.projection)?;
        let sim = similarity(&vhat, &model.text, &model.temps)?;
        let p_clip = clip_probs(&sim)?;
        fuse_scores(&p_ce, &p_clip, alpha)?
    };
    decode_detections(&pred, &fused, obj_threshold, scene_cfg)
}

/// Dataset mAP for a model over a set of scenes.
pub fn evaluate_model(
    model: &JointModel,
    scenes: &[SyntheticScene],
    scene_cfg: &SceneConfig,
    alpha: f64,
    obj_threshold: f64,
) -> Result<DatasetEval> {
    let mut images = Vec::with_capacity(scenes.len());
    for scene in scenes {
        images.push(ImageEval {
            dets: predict_scene(model, &scene.raw, scene_cfg, alpha, obj_threshold)?,
            gts: scene.gts.clone(),
        });
    }
    evaluate_dataset(&images)
}

// ---------------------------------------------------------------------------
// Full-graph gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_error: f64,
    pub params_checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error >= self.tolerance)
            .map(|g| g.group.as_str())
            .collect()
    }
}

/// A reduced configuration: the same graph at finite-difference-sweep scale.
pub fn gradcheck_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        scene: SceneConfig {
            canvas_side: 48,
            grid_h: 3,
            grid_w: 3,
            raw_dim: 5,
            num_classes: 3,
            objects_min: 1,
            objects_max: 2,
            noise_sigma: 0.4,
            signature_overlap: 0.3,
            signature_seed: seed,
        },
        vlhead: VlHeadConfig {
            feature_dim: 6,
            hidden_dim: 7,
            embed_dim: 9,
            // O(1) temperatures keep the softmax away from saturation, where
            // true gradients of ~1e-10 drop below central-difference
            // resolution on an O(1) objective and the relative error becomes
            // meaningless. The 1/tau_c formula itself is exercised at
            // distinct per-class values (see salted_model).
            tau_init: 1.0,
            ..VlHeadConfig::default()
        },
        batch_size: 2,
        ..TrainConfig::default()
    }
}

/// Run central finite differences on the total loss through the complete
/// composed graph and report the max relative error per parameter group.
pub fn gradcheck_all(seed: u64) -> Result<GradCheckReport> {
    gradcheck_with(gradcheck_config(seed), 1e-4)
}

/// A central difference taken within `eps` of a ReLU kink or smooth-L1
/// corner measures a one-sided slope, not the gradient, so the probe point
/// must keep at least this distance from every such seam. The margin is two
/// orders above the largest preactivation shift a 1e-6 parameter step can
/// cause at these scales.
const KINK_MARGIN: f64 = 1e-4;

/// Pre-normalization rows must keep a healthy norm so the normalization
/// Jacobian stays well-conditioned across probes.
const NORM_FLOOR: f64 = 1e-3;

/// Smallest nonzero analytic gradient the sweep can certify: the probe's
/// quotient carries rounding noise of about ulp(objective) / (2 eps)
/// ~ 5e-10, so gradients below ~1e-5 fail the 1e-4 relative bar on noise
/// alone.
const RESOLVE_MIN: f64 = 2e-5;

const MAX_INIT_SALTS: u64 = 32;

fn salted_model(config: &TrainConfig, salt: u64) -> Result<JointModel> {
    let vl = &config.vlhead;
    // backbone hidden shrunk to keep the sweep's parameter count small
    let detector = DetectorParams::init_with_hidden(
        config.scene.raw_dim,
        vl.feature_dim + 1,
        vl.feature_dim,
        config.scene.num_classes,
        derive_seed(config.seed, stream::BACKBONE, salt),
        derive_seed(config.seed, stream::HEADS, salt),
    );
    let projection = ProjectionHeadParams::init(
        vl.feature_dim,
        vl.hidden_dim,
        vl.embed_dim,
        derive_seed(config.seed, stream::PROJECTION, salt),
    );
    let text = TextEmbeddingTable::seeded(
        default_class_names(config.scene.num_classes),
        vl.embed_dim,
        derive_seed(config.seed, stream::TEXT_EMBEDDINGS, salt),
    )?;
    // distinct per-class temperatures so the class-specific scaling is
    // actually exercised by the sweep
    let mut temps =
        TemperatureVector::bounded(config.scene.num_classes, vl.tau_init, vl.tau_min, f64::INFINITY)?;
    for (c, t) in temps.tau.value.data_mut().iter_mut().enumerate() {
        *t += 0.15 * vl.tau_init * c as f64;
    }
    Ok(JointModel { detector, projection, text, temps })
}

/// Smallest distance of the batch's loss evaluation from any
/// non-differentiable seam. Returns 0 early when a seam is hit exactly.
fn batch_seam_distance(
    model: &JointModel,
    batch: &[&SyntheticScene],
    config: &TrainConfig,
    vl_active: bool,
) -> Result<f64> {
    let scene_cfg = &config.scene;
    let cell_anchors = anchors(scene_cfg)?;
    let mut min_dist = f64::INFINITY;
    // per box coordinate: (all contributions in the linear regime, sign sum)
    let mut box_linear = [(true, 0i64); 4];
    for scene in batch {
        let (pred, cache) = detector_forward(&scene.raw, &model.detector)?;
        for &v in cache.hidden_pre.data().iter().chain(cache.feature_pre.data()) {
            min_dist = min_dist.min(v.abs());
        }
        let det_assign = assign_positives(&cell_anchors, &scene.gts, config.iou_positive, true)?;
        let targets = build_detection_targets(&det_assign, &scene.gts, scene_cfg)?;
        for p in &targets.positives {
            for (k, &t) in p.box_target.iter().enumerate() {
                let u = pred.box_offsets.get(p.cell, k) - t;
                // distance to the smooth-L1 corner, and to its exact minimum
                // where the true gradient vanishes below probe resolution
                min_dist = min_dist.min((u.abs() - 1.0).abs()).min(u.abs());
                if u.abs() >= 1.0 {
                    box_linear[k].1 += u.signum() as i64;
                } else {
                    box_linear[k].0 = false;
                }
            }
        }
        if min_dist <= 0.0 {
            return Ok(0.0);
        }
        if vl_active {
            let vl_assign =
                assign_positives(&cell_anchors, &scene.gts, config.iou_positive, false)?;
            let rows: Vec<Vec<f64>> = vl_assign
                .iter()
                .filter(|a| a.is_positive)
                .map(|a| pred.features.row(a.anchor_index).to_vec())
                .collect();
            if !rows.is_empty() {
                let f_vl = Matrix::from_rows(&rows)?;
                let hidden_pre =
                    crate::numerics::affine(&f_vl, &model.projection.w1.value, model.projection.b1.value.row(0))?;
                for &v in hidden_pre.data() {
                    min_dist = min_dist.min(v.abs());
                }
                // a row with a single active unit makes the embedding exactly
                // parallel to one w2 row; normalization then nulls that
                // scale direction and finite differences see only rounding
                for r in 0..hidden_pre.rows() {
                    if hidden_pre.row(r).iter().filter(|&&v| v > 0.0).count() < 2 {
                        return Ok(0.0);
                    }
                }
                let hidden = crate::numerics::relu(&hidden_pre)?;
                let embed_pre = crate::numerics::affine(
                    &hidden,
                    &model.projection.w2.value,
                    model.projection.b2.value.row(0),
                )?;
                for r in 0..embed_pre.rows() {
                    let norm = crate::numerics::l2_norm(embed_pre.row(r));
                    if norm < NORM_FLOOR {
                        return Ok(0.0);
                    }
                }
            }
        }
    }
    // a coordinate whose contributions all sit in the linear regime with
    // balanced signs makes the loss exactly flat in that bias: the true
    // gradient is zero and the probe measures rounding only
    for (all_linear, sign_sum) in box_linear {
        if all_linear && sign_sum == 0 {
            return Ok(0.0);
        }
    }
    Ok(min_dist)
}

/// Gradient check for an arbitrary configuration.
///
/// The probe point must be differentiable: inits whose batch evaluation
/// lands within [`KINK_MARGIN`] of a ReLU kink or smooth-L1 corner are
/// resampled (deterministically, by salting the init streams) before the
/// sweep runs.
pub fn gradcheck_with(config: TrainConfig, tolerance: f64) -> Result<GradCheckReport> {
    let seed = config.seed;
    let report = gradcheck_detailed(config)?;
    let mut groups: BTreeMap<&'static str, GroupReport> = BTreeMap::new();
    for p in &report.params {
        let g = group_of(&p.name);
        let entry = groups.entry(g).or_insert_with(|| GroupReport {
            group: g.to_string(),
            max_rel_error: 0.0,
            params_checked: 0,
        });
        entry.max_rel_error = entry.max_rel_error.max(p.max_rel_error);
        entry.params_checked += p.checked;
    }
    Ok(GradCheckReport { seed, tolerance, groups: groups.into_values().collect() })
}

/// The per-parameter finite-difference sweep behind [`gradcheck_with`].
pub fn gradcheck_detailed(config: TrainConfig) -> Result<crate::numerics::FiniteDiffReport> {
    config.validate()?;
    let scenes = generate_dataset(&config.scene, config.seed, stream::SCENE, config.batch_size)?;
    let batch: Vec<&SyntheticScene> = scenes.iter().collect();
    let vl_active = config.vl_active();

    let mut model = None;
    for salt in 0..MAX_INIT_SALTS {
        let mut candidate = salted_model(&config, salt)?;
        if batch_seam_distance(&candidate, &batch, &config, vl_active)? <= KINK_MARGIN {
            continue;
        }
        compute_grads(&mut candidate, &batch, &config, vl_active)?;
        // every nonzero gradient must sit above the central-difference noise
        // floor ulp(f)/(2 eps), or its relative error measures rounding, not
        // the formula
        let min_nonzero = candidate
            .params_mut(true)
            .into_iter()
            .flat_map(|(p, _)| p.grad.data().iter().copied())
            .filter(|g| *g != 0.0)
            .map(f64::abs)
            .fold(f64::INFINITY, f64::min);
        if min_nonzero < RESOLVE_MIN {
            continue;
        }
        model = Some(candidate);
        break;
    }
    let mut model = model.ok_or_else(|| {
        Error::Generation(format!(
            "no resolvable probe point after {MAX_INIT_SALTS} init resamples"
        ))
    })?;

    let mut tensors = model.flatten();
    let cfg = config.clone();
    let mut probe = model.clone();
    let report = finite_diff_check(&mut tensors, 1e-6, move |ts| {
        probe.assign_values(ts)?;
        let scene_cfg = &cfg.scene;
        let cell_anchors = anchors(scene_cfg)?;
        let inv_b = 1.0 / batch.len() as f64;
        let mut l_det = 0.0;
        let mut vl_feature_rows: Vec<Vec<f64>> = Vec::new();
        let mut vl_labels: Vec<usize> = Vec::new();
        for scene in &batch {
            let (pred, _) = detector_forward(&scene.raw, &probe.detector)?;
            let det_assign =
                assign_positives(&cell_anchors, &scene.gts, cfg.iou_positive, true)?;
            let targets = build_detection_targets(&det_assign, &scene.gts, scene_cfg)?;
            l_det += loss_detection(
                &pred.obj_logits,
                &pred.cls_logits,
                &pred.box_offsets,
                &targets,
            )?
            .total
                * inv_b;
            if vl_active {
                let vl_assign =
                    assign_positives(&cell_anchors, &scene.gts, cfg.iou_positive, false)?;
                for a in &vl_assign {
                    if a.is_positive {
                        vl_feature_rows.push(pred.features.row(a.anchor_index).to_vec());
                        vl_labels.push(scene.gts[a.matched_gt.unwrap()].1);
                    }
                }
            }
        }
        let (mut l_cont, mut l_aux) = (0.0, 0.0);
        if vl_active && !vl_feature_rows.is_empty() {
            let f_vl = Matrix::from_rows(&vl_feature_rows)?;
            let vhat = visual_embed(&f_vl, &probe.projection)?;
            let sim = similarity(&vhat, &probe.text, &probe.temps)?;
            l_cont = loss_contrastive(&sim, &vl_labels)?;
            l_aux = loss_aux(&sim, &vl_labels)?;
        }
        Ok(loss_total(l_det, l_cont, l_aux, &cfg.weights, vl_labels.len())?.l_total)
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A fast world for loop-level tests.
    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            train_scenes: 24,
            val_scenes: 8,
            eval_every: 3,
            scene: SceneConfig {
                canvas_side: 64,
                grid_h: 4,
                grid_w: 4,
                raw_dim: 10,
                num_classes: 4,
                ..SceneConfig::default()
            },
            vlhead: VlHeadConfig {
                feature_dim: 16,
                hidden_dim: 24,
                embed_dim: 32,
                ..VlHeadConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_config_and_seed_reproduce_metrics_bitwise() {
        let config = tiny_config();
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(
            serde_json::to_string(&a.metrics).unwrap(),
            serde_json::to_string(&b.metrics).unwrap()
        );
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn zero_vl_weights_match_a_branchless_build_bitwise() {
        let mut with_branch = tiny_config();
        with_branch.weights = LossWeights::zero();
        with_branch.alpha = 1.0;
        let mut without_branch = with_branch.clone();
        without_branch.vl_branch = false;

        let a = train(&with_branch).unwrap();
        let b = train(&without_branch).unwrap();
        assert_eq!(a.metrics.mode, "ce-baseline");
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(a.checkpoint.momenta, b.checkpoint.momenta);
        assert_eq!(a.checkpoint.step, b.checkpoint.step);
    }

    #[test]
    fn vl_branch_disabled_with_nonzero_weights_is_rejected() {
        let mut config = tiny_config();
        config.vl_branch = false;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn loss_descends_on_the_tiny_world() {
        let mut config = tiny_config();
        config.epochs = 6;
        config.lr_scale = 4.0;
        let out = train(&config).unwrap();
        let first = out.metrics.records.first().unwrap().mean_l_total;
        let last = out.metrics.records.last().unwrap().mean_l_total;
        assert!(last < first, "no descent: {first} -> {last}");
    }

    #[test]
    fn temperatures_stay_clamped_during_training() {
        let mut config = tiny_config();
        config.lr_scale = 100.0; // deliberately aggressive
        let out = train(&config).unwrap();
        let tau = out
            .checkpoint
            .params
            .iter()
            .find(|a| a.name == "temperatures")
            .unwrap();
        assert!(tau.data.iter().all(|&t| t >= config.vlhead.tau_min));
    }

    #[test]
    fn gradcheck_passes_on_seed_zero_with_all_five_groups() {
        let report = gradcheck_all(0).unwrap();
        let names: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(
            names,
            vec!["backbone", "heads", "projection", "temperatures", "text_embeddings"]
        );
        assert!(report.passed(), "failing groups: {:?}", report.failing_groups());
        for g in &report.groups {
            assert!(g.max_rel_error < 1e-4, "{}: {:e}", g.group, g.max_rel_error);
        }
    }

    #[test]
    fn zero_vl_weights_leave_vl_gradients_zero() {
        let mut config = gradcheck_config(3);
        config.weights = LossWeights::zero();
        let mut model = JointModel::init(&config, None).unwrap();
        let scenes = generate_dataset(&config.scene, 3, stream::SCENE, 2).unwrap();
        let batch: Vec<&SyntheticScene> = scenes.iter().collect();
        let outcome = compute_grads(&mut model, &batch, &config, config.vl_active()).unwrap();
        assert_eq!(outcome.breakdown.l_cont, 0.0);
        assert!(model.text.embeddings.grad.data().iter().all(|&g| g == 0.0));
        assert!(model.temps.tau.grad.data().iter().all(|&g| g == 0.0));
        assert!(model.projection.w1.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_positive_set_leaves_vl_gradients_zero() {
        // scenes without any ground truths produce no positive cells
        let mut config = gradcheck_config(4);
        config.scene.objects_min = 0;
        config.scene.objects_max = 0;
        let mut model = JointModel::init(&config, None).unwrap();
        let scenes = generate_dataset(&config.scene, 4, stream::SCENE, 2).unwrap();
        assert!(scenes.iter().all(|s| s.gts.is_empty()));
        let batch: Vec<&SyntheticScene> = scenes.iter().collect();
        let outcome = compute_grads(&mut model, &batch, &config, true).unwrap();
        assert_eq!(outcome.breakdown.n_positives, 0);
        assert_eq!(outcome.breakdown.l_cont, 0.0);
        assert_eq!(outcome.breakdown.l_aux, 0.0);
        assert!(model.text.embeddings.grad.data().iter().all(|&g| g == 0.0));
        assert!(model.temps.tau.grad.data().iter().all(|&g| g == 0.0));
        assert!(model.projection.w2.grad.data().iter().all(|&g| g == 0.0));
        // the detection loss still trains objectness
        assert!(outcome.breakdown.l_det > 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_resumes_bit_for_bit() {
        let config = tiny_config();
        let scenes = generate_dataset(&config.scene, 7, stream::TRAIN_SCENES, 8).unwrap();
        let b1: Vec<&SyntheticScene> = scenes[0..4].iter().collect();
        let b2: Vec<&SyntheticScene> = scenes[4..8].iter().collect();

        let mut a = Trainer::new(config.clone(), None).unwrap();
        a.step_batch(&b1, 0.05).unwrap();
        let ckpt = a.checkpoint();
        // through the serialized form, as the CLI would store it
        let json = serde_json::to_string(&ckpt).unwrap();
        let restored: Checkpoint = serde_json::from_str(&json).unwrap();
        a.step_batch(&b2, 0.05).unwrap();

        let mut b = Trainer::from_checkpoint(&restored).unwrap();
        assert_eq!(b.step_count(), 1);
        b.step_batch(&b2, 0.05).unwrap();

        let pa = a.model.flatten();
        let pb = b.model.flatten();
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value, "parameter {} diverged after resume", x.name);
        }
    }

    #[test]
    fn vl_branch_consumes_the_reported_feature_rows() {
        // recomputing the VL losses from pred.features reproduces the step's
        // values bit-for-bit, so the branch saw exactly those rows
        let config = gradcheck_config(5);
        let mut model = JointModel::init(&config, None).unwrap();
        let scenes = generate_dataset(&config.scene, 5, stream::SCENE, 2).unwrap();
        let batch: Vec<&SyntheticScene> = scenes.iter().collect();
        let outcome = compute_grads(&mut model, &batch, &config, true).unwrap();
        if outcome.breakdown.n_positives == 0 {
            return;
        }

        let cell_anchors = anchors(&config.scene).unwrap();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for scene in &batch {
            let (pred, _) = detector_forward(&scene.raw, &model.detector).unwrap();
            let assign =
                assign_positives(&cell_anchors, &scene.gts, config.iou_positive, false).unwrap();
            for a in &assign {
                if a.is_positive {
                    rows.push(pred.features.row(a.anchor_index).to_vec());
                    labels.push(scene.gts[a.matched_gt.unwrap()].1);
                }
            }
        }
        let f_vl = Matrix::from_rows(&rows).unwrap();
        let vhat = visual_embed(&f_vl, &model.projection).unwrap();
        let sim = similarity(&vhat, &model.text, &model.temps).unwrap();
        let l_cont = loss_contrastive(&sim, &labels).unwrap();
        assert_eq!(l_cont, outcome.breakdown.l_cont);
    }

    #[test]
    fn nan_parameters_abort_with_a_numeric_error() {
        let config = tiny_config();
        let mut trainer = Trainer::new(config.clone(), None).unwrap();
        trainer.model.detector.backbone_w1.value.data_mut()[0] = f64::NAN;
        let scenes = generate_dataset(&config.scene, 1, stream::TRAIN_SCENES, 4).unwrap();
        let err = trainer.run(&scenes, &[]).unwrap_err();
        assert!(err.is_numeric(), "expected numeric abort, got {err}");
    }

    #[test]
    fn zero_epochs_yield_initial_params_and_empty_history() {
        let mut config = tiny_config();
        config.epochs = 0;
        let out = train(&config).unwrap();
        assert!(out.metrics.records.is_empty());
        assert_eq!(out.checkpoint.step, 0);
        let mut fresh = JointModel::init(&config, None).unwrap();
        for (arr, (p, _)) in out.checkpoint.params.iter().zip(fresh.params_mut(true)) {
            assert_eq!(arr.name, p.name);
            assert_eq!(arr.data, p.value.data());
        }
    }

    #[test]
    fn lr_schedule_steps_by_gamma() {
        let config = TrainConfig {
            lr: 0.005,
            lr_scale: 20.0,
            lr_step_epochs: 3,
            lr_gamma: 0.1,
            ..TrainConfig::default()
        };
        let base = 0.1;
        assert!((config.lr_at_epoch(0) - base).abs() < 1e-15);
        assert!((config.lr_at_epoch(2) - base).abs() < 1e-15);
        assert!((config.lr_at_epoch(3) - base * 0.1).abs() < 1e-15);
        assert!((config.lr_at_epoch(6) - base * 0.01).abs() < 1e-15);
    }

    /// In the clean world (no noise, orthogonal signatures) one epoch must
    /// already make the shared features linearly separable by class.
    #[test]
    fn linear_probe_separates_classes_in_the_clean_world() {
        let mut config = tiny_config();
        config.epochs = 1;
        config.scene.noise_sigma = 0.0;
        config.scene.signature_overlap = 0.0;
        config.val_scenes = 0;
        let out = train(&config).unwrap();
        let model = out.checkpoint.restore_model().unwrap();

        // collect (feature row, class) pairs from positive cells
        let scenes =
            generate_dataset(&config.scene, config.seed, stream::TRAIN_SCENES, 40).unwrap();
        let cell_anchors = anchors(&config.scene).unwrap();
        let mut feats: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for scene in &scenes {
            let (pred, _) = detector_forward(&scene.raw, &model.detector).unwrap();
            let assign =
                assign_positives(&cell_anchors, &scene.gts, config.iou_positive, true).unwrap();
            for a in &assign {
                if a.is_positive {
                    feats.push(pred.features.row(a.anchor_index).to_vec());
                    labels.push(scene.gts[a.matched_gt.unwrap()].1);
                }
            }
        }
        assert!(feats.len() >= 40, "need a usable probe set, got {}", feats.len());

        // multinomial logistic probe, plain gradient descent
        let c = config.scene.num_classes;
        let d = config.vlhead.feature_dim;
        let mut w = Matrix::zeros(d, c);
        let mut b = vec![0.0; c];
        let x = Matrix::from_rows(&feats).unwrap();
        for _ in 0..300 {
            let logits = {
                let mut m = x.matmul(&w).unwrap();
                for r in 0..m.rows() {
                    for (v, &bv) in m.row_mut(r).iter_mut().zip(b.iter()) {
                        *v += bv;
                    }
                }
                m
            };
            let mut d_logits = crate::numerics::softmax_rows(&logits).unwrap();
            for (i, &y) in labels.iter().enumerate() {
                d_logits.row_mut(i)[y] -= 1.0;
            }
            d_logits.scale_in_place(1.0 / labels.len() as f64);
            let dw = x.matmul_transpose_self(&d_logits).unwrap();
            w.add_scaled(&dw, -0.5).unwrap();
            for (bi, &g) in b.iter_mut().zip(d_logits.col_sum().iter()) {
                *bi -= 0.5 * g;
            }
        }
        let logits = x.matmul(&w).unwrap();
        let mut correct = 0;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v + b[k] > row[best] + b[best] {
                    best = k;
                }
            }
            if best == y {
                correct += 1;
            }
        }
        let acc = correct as f64 / labels.len() as f64;
        assert!(acc > 0.95, "linear probe accuracy {acc:.3} on {} samples", labels.len());
    }

    #[test]
    fn eval_records_appear_on_schedule_and_final_epoch() {
        let mut config = tiny_config();
        config.epochs = 4;
        config.eval_every = 3;
        let out = train(&config).unwrap();
        let evaluated: Vec<usize> = out
            .metrics
            .records
            .iter()
            .filter(|r| r.map50.is_some())
            .map(|r| r.epoch)
            .collect();
        assert_eq!(evaluated, vec![3, 4]);
    }
}
