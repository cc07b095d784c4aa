//! The run configuration file: one JSON document with sections
//! `{scene, train, vlhead, eval, paths}`. Every field has a default, unknown
//! keys are rejected, and the resolved document is echoed into every output
//! artifact.

use crate::error::{CliError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use vldet_core::losses::LossWeights;
use vldet_core::nanodet::SceneConfig;
use vldet_core::trainer::TrainConfig;
use vldet_core::vlhead::VlHeadConfig;

/// Optimization-loop settings (the scene and head sections live alongside).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub lambda_cont: f64,
    pub lambda_aux: f64,
    pub alpha: f64,
    pub iou_positive: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub eval_obj_threshold: f64,
    pub vl_branch: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_scale: t.lr_scale,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_step_epochs: t.lr_step_epochs,
            lr_gamma: t.lr_gamma,
            lambda_cont: t.weights.lambda_cont,
            lambda_aux: t.weights.lambda_aux,
            alpha: t.alpha,
            iou_positive: t.iou_positive,
            seed: t.seed,
            eval_every: t.eval_every,
            train_scenes: t.train_scenes,
            val_scenes: t.val_scenes,
            eval_obj_threshold: t.eval_obj_threshold,
            vl_branch: t.vl_branch,
        }
    }
}

/// Inference/evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Score-fusion weight on the detector's own class probabilities.
    pub alpha: f64,
    /// Objectness threshold when decoding detections for evaluation.
    pub obj_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { alpha: 0.7, obj_threshold: 0.05 }
    }
}

/// Optional file locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    /// Text-embedding import document; seeded-random init when absent.
    pub text_embeddings: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// The whole run configuration document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train: TrainSection,
    pub vlhead: VlHeadConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading config {}", path.display()), e))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Format(format!("config {}: {e}", path.display())))?;
        config.to_train_config().validate()?;
        Ok(config)
    }

    /// Assemble the core training configuration from the sections.
    pub fn to_train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_scale: t.lr_scale,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_step_epochs: t.lr_step_epochs,
            lr_gamma: t.lr_gamma,
            weights: LossWeights { lambda_cont: t.lambda_cont, lambda_aux: t.lambda_aux },
            alpha: t.alpha,
            iou_positive: t.iou_positive,
            seed: t.seed,
            eval_every: t.eval_every,
            train_scenes: t.train_scenes,
            val_scenes: t.val_scenes,
            eval_obj_threshold: t.eval_obj_threshold,
            vl_branch: t.vl_branch,
            scene: self.scene.clone(),
            vlhead: self.vlhead.clone(),
        }
    }

    /// Force the CE-only baseline: zero VL weights, detector-only scoring.
    pub fn apply_baseline(&mut self) {
        self.train.lambda_cont = 0.0;
        self.train.lambda_aux = 0.0;
        self.train.alpha = 1.0;
        self.eval.alpha = 1.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_and_rejects_unknown_keys() {
        let config = RunConfig::default();
        let json = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);

        let bad = r#"{"train": {"lerning_rate": 0.1}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let bad = r#"{"scene": {"canvas": 64}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let partial = r#"{"train": {"epochs": 3, "seed": 9}, "scene": {"num_classes": 4}}"#;
        let config: RunConfig = serde_json::from_str(partial).unwrap();
        assert_eq!(config.train.epochs, 3);
        assert_eq!(config.train.seed, 9);
        assert_eq!(config.scene.num_classes, 4);
        assert_eq!(config.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(config.eval.alpha, 0.7);
    }

    #[test]
    fn baseline_zeroes_vl_terms() {
        let mut config = RunConfig::default();
        config.apply_baseline();
        let t = config.to_train_config();
        assert!(t.weights.vl_inactive());
        assert_eq!(t.alpha, 1.0);
        assert_eq!(t.mode(), "ce-baseline");
    }
}
