//! Shared fixtures for the pipeline benchmarks.

use vldet_core::geometry::{BBox, Detection};
use vldet_core::nanodet::{generate_scene, SceneConfig, SyntheticScene};
use vldet_core::seed::rng_from_seed;
use vldet_core::trainer::{JointModel, TrainConfig};

/// The default desk-scale world and model, as trained by the CLI.
pub fn default_setup() -> (TrainConfig, JointModel, Vec<SyntheticScene>) {
    let config = TrainConfig::default();
    let model = JointModel::init(&config, None).expect("default config is valid");
    let scenes = (0..config.batch_size)
        .map(|i| generate_scene(&config.scene, i as u64).expect("generation succeeds"))
        .collect();
    (config, model, scenes)
}

/// A crowded random detection set for NMS benchmarks.
pub fn random_detections(n: usize, classes: usize, seed: u64) -> Vec<Detection> {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(0.0..100.0);
            let y: f64 = rng.random_range(0.0..100.0);
            let w: f64 = rng.random_range(2.0..40.0);
            let h: f64 = rng.random_range(2.0..40.0);
            Detection::new(
                BBox::new(x, y, x + w, y + h).unwrap(),
                rng.random_range(0..classes),
                rng.random_range(0.0..1.0),
            )
        })
        .collect()
}

pub fn scene_config() -> SceneConfig {
    SceneConfig::default()
}
