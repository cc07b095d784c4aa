//! Wire formats: JSON-lines datasets and detections, the text-embedding
//! import document, checkpoint/metrics/eval documents, and the provenance
//! sidecar for JSON-lines outputs.

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use vldet_core::geometry::{BBox, Detection};
use vldet_core::nanodet::{SceneConfig, SyntheticScene};
use vldet_core::trainer::{Checkpoint, MetricsHistory};
use vldet_core::vlhead::TextEmbeddingTable;
use vldet_core::Matrix;

// ---------------------------------------------------------------------------
// Scene dataset (JSON lines, one scene per line)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: u64,
    /// H*W rows of D_raw per-cell channels.
    pub raw: Vec<Vec<f64>>,
    pub gts: Vec<GtRecord>,
}

impl SceneRecord {
    pub fn from_scene(scene_id: u64, scene: &SyntheticScene) -> Self {
        SceneRecord {
            scene_id,
            raw: (0..scene.raw.rows()).map(|r| scene.raw.row(r).to_vec()).collect(),
            gts: scene
                .gts
                .iter()
                .map(|(b, c)| GtRecord {
                    bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
                    class_id: *c,
                })
                .collect(),
        }
    }

    /// Validate against the world it claims to come from.
    pub fn to_scene(&self, config: &SceneConfig) -> Result<SyntheticScene> {
        if self.raw.len() != config.cells() {
            return Err(CliError::Format(format!(
                "scene {}: {} raw rows, expected {}",
                self.scene_id,
                self.raw.len(),
                config.cells()
            )));
        }
        for (i, row) in self.raw.iter().enumerate() {
            if row.len() != config.raw_dim {
                return Err(CliError::Format(format!(
                    "scene {} row {i}: {} channels, expected {}",
                    self.scene_id,
                    row.len(),
                    config.raw_dim
                )));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(CliError::Format(format!(
                    "scene {} row {i}: non-finite channel",
                    self.scene_id
                )));
            }
        }
        let raw = Matrix::from_rows(&self.raw)?;
        let mut gts = Vec::with_capacity(self.gts.len());
        for g in &self.gts {
            if g.class_id >= config.num_classes {
                return Err(CliError::Format(format!(
                    "scene {}: class {} out of range for {} classes",
                    self.scene_id, g.class_id, config.num_classes
                )));
            }
            let b = BBox::new(g.bbox[0], g.bbox[1], g.bbox[2], g.bbox[3])?;
            gts.push((b, g.class_id));
        }
        Ok(SyntheticScene { raw, gts })
    }
}

pub fn write_scenes_jsonl(path: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path)
            .map_err(|e| CliError::io(format!("creating {}", path.display()), e))?,
    );
    for (i, scene) in scenes.iter().enumerate() {
        let record = SceneRecord::from_scene(i as u64, scene);
        let line = serde_json::to_string(&record)
            .map_err(|e| CliError::Format(format!("encoding scene {i}: {e}")))?;
        writeln!(out, "{line}").map_err(|e| CliError::io("writing dataset", e))?;
    }
    out.flush().map_err(|e| CliError::io("flushing dataset", e))?;
    Ok(())
}

pub fn read_scenes_jsonl(path: &Path, config: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
    let mut scenes = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io("reading dataset", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::Format(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        scenes.push(record.to_scene(config)?);
    }
    Ok(scenes)
}

// ---------------------------------------------------------------------------
// Detections (JSON lines, one scene per line)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDetections {
    pub scene_id: u64,
    pub detections: Vec<DetectionRecord>,
}

impl SceneDetections {
    pub fn from_detections(scene_id: u64, dets: &[Detection]) -> Self {
        SceneDetections {
            scene_id,
            detections: dets
                .iter()
                .map(|d| DetectionRecord {
                    bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max],
                    class_id: d.class_id,
                    score: d.score,
                })
                .collect(),
        }
    }

    pub fn to_detections(&self) -> Result<Vec<Detection>> {
        self.detections
            .iter()
            .map(|r| {
                let b = BBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3])?;
                if !r.score.is_finite() {
                    return Err(CliError::Format(format!(
                        "scene {}: non-finite detection score",
                        self.scene_id
                    )));
                }
                Ok(Detection::new(b, r.class_id, r.score))
            })
            .collect()
    }
}

pub fn write_detections_jsonl(path: &Path, per_scene: &[SceneDetections]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path)
            .map_err(|e| CliError::io(format!("creating {}", path.display()), e))?,
    );
    for record in per_scene {
        let line = serde_json::to_string(record)
            .map_err(|e| CliError::Format(format!("encoding detections: {e}")))?;
        writeln!(out, "{line}").map_err(|e| CliError::io("writing detections", e))?;
    }
    out.flush().map_err(|e| CliError::io("flushing detections", e))?;
    Ok(())
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<SceneDetections>> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io("reading detections", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            CliError::Format(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Text-embedding import
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextClassRecord {
    pub name: String,
    pub vector: Vec<f64>,
}

/// `{dim, classes: [{name, vector}]}`; every vector must have length `dim`
/// and finite entries. Rows are L2-normalized on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEmbeddingFile {
    pub dim: usize,
    pub classes: Vec<TextClassRecord>,
}

pub fn read_text_embeddings(path: &Path) -> Result<TextEmbeddingTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let doc: TextEmbeddingFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    let names: Vec<String> = doc.classes.iter().map(|c| c.name.clone()).collect();
    let vectors: Vec<Vec<f64>> = doc.classes.into_iter().map(|c| c.vector).collect();
    Ok(TextEmbeddingTable::from_vectors(names, doc.dim, &vectors)?)
}

// ---------------------------------------------------------------------------
// Documents
// ---------------------------------------------------------------------------

/// Provenance sidecar written next to JSON-lines outputs, which must hold
/// exactly one record per scene and so cannot embed the config themselves.
/// `config` holds the resolved configuration of the producing command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaSidecar {
    pub command: String,
    pub seed: u64,
    pub count: usize,
    pub config: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// metrics.json: history plus full provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub seed: u64,
    pub config: RunConfig,
    #[serde(flatten)]
    pub metrics: MetricsHistory,
}

/// eval.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalDoc {
    pub map50: f64,
    pub map5095: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    pub alpha: f64,
    pub obj_threshold: f64,
    pub n_images: usize,
    pub checkpoint_step: u64,
    pub seed: u64,
    pub config: vldet_core::trainer::TrainConfig,
}

pub fn write_json_doc<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)
        .map_err(|e| CliError::Format(format!("encoding {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Format(format!("checkpoint {}: {e}", path.display())))
}
