//! Command implementations behind the `vldet` binary. Each `run_*` function
//! is callable as a library so the integration suites drive the exact code
//! the CLI ships.

pub mod config;
pub mod error;
pub mod formats;

use clap::Args;
use std::path::{Path, PathBuf};

use config::RunConfig;
use error::{CliError, Result};
use formats::{
    read_checkpoint, read_scenes_jsonl, read_text_embeddings, sidecar_path, write_detections_jsonl,
    write_json_doc, write_scenes_jsonl, EvalDoc, MetaSidecar, MetricsDoc, SceneDetections,
};
use vldet_core::evalmap::ImageEval;
use vldet_core::nanodet::SyntheticScene;
use vldet_core::seed::stream;
use vldet_core::trainer::{self, evaluate_model, generate_dataset, gradcheck_all, GradCheckReport};
use vldet_core::vlhead::TextEmbeddingTable;

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config's train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scenes to generate.
    #[arg(long)]
    pub count: usize,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct GenDataSummary {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
}

pub fn run_gen_data(args: &GenDataArgs) -> Result<GenDataSummary> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let seed = config.train.seed;
    config.scene.validate()?;
    let scenes = generate_dataset(&config.scene, seed, stream::SCENE, args.count)?;
    write_scenes_jsonl(&args.out, &scenes)?;
    write_json_doc(
        &sidecar_path(&args.out),
        &MetaSidecar {
            command: "gen-data".into(),
            seed,
            count: args.count,
            config: serde_json::to_value(&config)
                .map_err(|e| CliError::Format(e.to_string()))?,
        },
    )?;
    Ok(GenDataSummary { out: args.out.clone(), count: args.count, seed })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset (JSON lines). Mutually exclusive with --generate.
    #[arg(long, conflicts_with = "generate")]
    pub data: Option<PathBuf>,
    /// Generate train/val data from the config instead of loading files.
    #[arg(long)]
    pub generate: bool,
    /// Validation dataset (JSON lines); only with --data.
    #[arg(long, requires = "data")]
    pub val_data: Option<PathBuf>,
    /// Output directory for checkpoint.json, metrics.json, config.json.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// CE-only baseline: lambda_cont = lambda_aux = 0, alpha = 1.
    #[arg(long)]
    pub baseline: bool,
    /// Master seed; overrides the config's train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub mode: String,
    pub epochs: usize,
    pub final_map50: Option<f64>,
}

pub fn run_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if args.baseline {
        config.apply_baseline();
    }
    let train_config = config.to_train_config();
    train_config.validate()?;

    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| config.paths.out_dir.clone())
        .ok_or_else(|| CliError::Usage("--out-dir (or paths.out_dir) is required".into()))?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::io(format!("creating {}", out_dir.display()), e))?;

    let text: Option<TextEmbeddingTable> = match &config.paths.text_embeddings {
        Some(p) => Some(read_text_embeddings(p)?),
        None => None,
    };

    let data_path = args.data.clone().or_else(|| config.paths.train_data.clone());
    let output = match (&data_path, args.generate) {
        (Some(path), false) => {
            let train_scenes = read_scenes_jsonl(path, &train_config.scene)?;
            let val_path = args.val_data.clone().or_else(|| config.paths.val_data.clone());
            let val_scenes = match val_path {
                Some(p) => read_scenes_jsonl(&p, &train_config.scene)?,
                None => Vec::new(),
            };
            trainer::train_on(&train_config, &train_scenes, &val_scenes, text)?
        }
        (None, true) => trainer::train_with(&train_config, text)?,
        (None, false) => {
            return Err(CliError::Usage(
                "either --data (or paths.train_data) or --generate is required".into(),
            ))
        }
        (Some(_), true) => unreachable!("clap conflicts_with"),
    };

    write_json_doc(&out_dir.join("checkpoint.json"), &output.checkpoint)?;
    write_json_doc(
        &out_dir.join("metrics.json"),
        &MetricsDoc {
            seed: train_config.seed,
            config: config.clone(),
            metrics: output.metrics.clone(),
        },
    )?;
    write_json_doc(&out_dir.join("config.json"), &config)?;

    Ok(TrainSummary {
        out_dir,
        mode: output.metrics.mode.clone(),
        epochs: output.metrics.records.len(),
        final_map50: output.metrics.records.last().and_then(|r| r.map50),
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to evaluate on (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Score-fusion weight; the detector branch alone at 1.
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    /// Output eval.json path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalDoc> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let model = ckpt.restore_model()?;
    let scenes = read_scenes_jsonl(&args.data, &ckpt.config.scene)?;
    let obj_threshold = ckpt.config.eval_obj_threshold;
    let eval =
        evaluate_model(&model, &scenes, &ckpt.config.scene, args.alpha, obj_threshold)?;
    let per_class_ap = eval
        .per_class_ap50
        .iter()
        .map(|(&c, &ap)| {
            let name = ckpt
                .class_names
                .get(c)
                .cloned()
                .unwrap_or_else(|| format!("class_{c}"));
            (name, ap)
        })
        .collect();
    let doc = EvalDoc {
        map50: eval.map50,
        map5095: eval.map5095,
        per_class_ap,
        alpha: args.alpha,
        obj_threshold,
        n_images: scenes.len(),
        checkpoint_step: ckpt.step,
        seed: ckpt.config.seed,
        config: ckpt.config.clone(),
    };
    write_json_doc(&args.out, &doc)?;
    Ok(doc)
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to run inference on (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Score-fusion weight; the detector branch alone at 1.
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    /// Keep cells whose objectness probability reaches this value.
    #[arg(long, default_value_t = 0.25)]
    pub obj_threshold: f64,
    /// Output detections.jsonl path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct InferSummary {
    pub out: PathBuf,
    pub n_scenes: usize,
    pub n_detections: usize,
}

pub fn run_infer(args: &InferArgs) -> Result<InferSummary> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let model = ckpt.restore_model()?;
    let scenes = read_scenes_jsonl(&args.data, &ckpt.config.scene)?;
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut n_detections = 0;
    for (i, scene) in scenes.iter().enumerate() {
        let dets = trainer::predict_scene(
            &model,
            &scene.raw,
            &ckpt.config.scene,
            args.alpha,
            args.obj_threshold,
        )?;
        n_detections += dets.len();
        per_scene.push(SceneDetections::from_detections(i as u64, &dets));
    }
    write_detections_jsonl(&args.out, &per_scene)?;
    write_json_doc(
        &sidecar_path(&args.out),
        &MetaSidecar {
            command: "infer".into(),
            seed: ckpt.config.seed,
            count: scenes.len(),
            config: serde_json::to_value(&ckpt.config)
                .map_err(|e| CliError::Format(e.to_string()))?,
        },
    )?;
    Ok(InferSummary { out: args.out.clone(), n_scenes: scenes.len(), n_detections })
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn run_gradcheck(seed: u64) -> Result<GradCheckReport> {
    Ok(gradcheck_all(seed)?)
}

/// Evaluate stored detections (e.g. from `infer`) against a dataset's ground
/// truths: the detections.jsonl round-trip consumer.
pub fn evaluate_stored_detections(
    detections_path: &Path,
    data_path: &Path,
    scene_config: &vldet_core::nanodet::SceneConfig,
) -> Result<vldet_core::evalmap::DatasetEval> {
    let scenes = read_scenes_jsonl(data_path, scene_config)?;
    let stored = formats::read_detections_jsonl(detections_path)?;
    let mut images: Vec<ImageEval> = scenes
        .iter()
        .map(|s| ImageEval { dets: Vec::new(), gts: s.gts.clone() })
        .collect();
    for record in &stored {
        let idx = record.scene_id as usize;
        if idx >= images.len() {
            return Err(CliError::Format(format!(
                "detections reference scene {idx} but the dataset has {} scenes",
                images.len()
            )));
        }
        images[idx].dets = record.to_detections()?;
    }
    Ok(vldet_core::evalmap::evaluate_dataset(&images)?)
}

pub fn generate_scenes_for(config: &RunConfig, seed: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    Ok(generate_dataset(&config.scene, seed, stream::SCENE, count)?)
}
