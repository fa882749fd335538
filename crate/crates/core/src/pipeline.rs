//! File-level drivers: score a data directory, and evaluate a split from
//! exported features.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::config::{LaterConfig, OvoConfig, SourceFeatures};
use crate::later::{
    build_anchor, source_center, CenterState, ClassifierHead, CorrectionMode, LaterError, LoraBankB,
    StreamEvaluator, VideoPrediction,
};
use crate::metrics::SplitEval;
use crate::tensorio::{
    depth_path, features_path, poses_path, read_poses, read_tensor, Manifest, Split, TensorIoError,
};
use crate::viewgeom::{score_frame, DepthMap, FrameGeometry, FrameScore, GeometryConfig, InvalidReason};
use crate::viewscore::{apply_group_scores, group_by_timestamp, score_video, GroupReport, KeyPattern, ScoreError, VideoScore};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
    #[error(transparent)]
    Later(#[from] LaterError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Model { path: PathBuf, message: String },
    #[error("video {video_id}: {source}")]
    Video {
        video_id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("video {video_id}: class {class_label:?} is not in the classifier head")]
    UnknownClass { video_id: String, class_label: String },
    #[error("no training videos to compute the source center from")]
    NoSourceVideos,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn in_video(video_id: &str) -> impl FnOnce(PipelineError) -> PipelineError + '_ {
    move |e| PipelineError::Video {
        video_id: video_id.to_string(),
        source: Box::new(e),
    }
}

/// Score every frame listed in a video's pose file. Depth is only read for
/// frames whose pose is marked valid.
pub fn score_video_dir(
    data: &Path,
    video_id: &str,
    cfg: &GeometryConfig,
    seed: u64,
) -> Result<VideoScore, PipelineError> {
    let run = || -> Result<VideoScore, PipelineError> {
        let poses = read_poses(poses_path(data, video_id))?;
        let mut frames = Vec::with_capacity(poses.len());
        for pose in poses {
            // Frames the upstream model failed on carry no depth map.
            if !pose.valid {
                frames.push(FrameScore::invalid(pose.frame_index, InvalidReason::NonfiniteGeometry));
                continue;
            }
            let depth = DepthMap::from_tensor(&read_tensor(depth_path(data, video_id, pose.frame_index))?)?;
            let g = FrameGeometry {
                depth,
                pose,
                stride: cfg.stride,
            };
            frames.push(score_frame(&g, cfg, seed));
        }
        Ok(score_video(video_id, frames))
    };
    run().map_err(in_video(video_id))
}

#[derive(Debug, Clone)]
pub struct ScoringOutcome {
    /// Manifest with `video_score`, group `score` and `timestamp_key` filled.
    pub manifest: Manifest,
    pub videos: Vec<VideoScore>,
    pub groups: GroupReport,
}

pub fn score_manifest(data: &Path, manifest: &Manifest, cfg: &OvoConfig) -> Result<ScoringOutcome, PipelineError> {
    let pattern = cfg
        .scoring
        .timestamp_pattern
        .as_deref()
        .map(KeyPattern::new)
        .transpose()?;
    let mut videos = Vec::with_capacity(manifest.len());
    let mut rows = manifest.rows().to_vec();
    for row in &mut rows {
        let v = score_video_dir(data, &row.video_id, &cfg.geometry, cfg.scoring.seed)?;
        row.video_score = v.score_deg;
        videos.push(v);
    }
    let with_video_scores = Manifest::new(rows)?;
    let groups = group_by_timestamp(&with_video_scores, pattern.as_ref());
    let manifest = apply_group_scores(&with_video_scores, &groups);
    Ok(ScoringOutcome {
        manifest,
        videos,
        groups,
    })
}

/// Writes `manifest.csv`, `video_scores.jsonl` and `groups.json` to `out`.
pub fn write_scoring(outcome: &ScoringOutcome, out: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    crate::tensorio::save_manifest(&outcome.manifest, out.join("manifest.csv"))?;

    let path = out.join("video_scores.jsonl");
    let mut buf = Vec::new();
    for v in &outcome.videos {
        serde_json::to_writer(&mut buf, v).expect("video scores serialize");
        buf.push(b'\n');
    }
    fs::write(&path, buf).map_err(io_err(&path))?;

    let path = out.join("groups.json");
    let mut json = serde_json::to_string_pretty(&outcome.groups).expect("group report serializes");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))
}

/// LoRA-B bank and classifier head exported by the recognizer.
#[derive(Debug, Clone)]
pub struct Model {
    pub bank: LoraBankB,
    pub head: ClassifierHead,
}

fn model_err(path: &Path, message: impl Into<String>) -> PipelineError {
    PipelineError::Model {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads `classifier_W.ovot`, `classifier_b.ovot`, `classes.txt` and every
/// `lora_B_<layer>.ovot` (in file-name order) from `model_dir`.
pub fn load_model(model_dir: &Path) -> Result<Model, PipelineError> {
    load_model_from(model_dir, model_dir)
}

/// Like [`load_model`], with the adapters and the head in separate directories.
pub fn load_model_from(lora_dir: &Path, head_dir: &Path) -> Result<Model, PipelineError> {
    let weight = read_tensor(head_dir.join("classifier_W.ovot"))?.to_matrix()?;
    let bias = read_tensor(head_dir.join("classifier_b.ovot"))?.to_vector()?;
    let classes_path = head_dir.join("classes.txt");
    let classes: Vec<String> = fs::read_to_string(&classes_path)
        .map_err(io_err(&classes_path))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let head = ClassifierHead::new(weight, bias, classes).map_err(|e| model_err(head_dir, e.to_string()))?;

    let mut lora_files = Vec::new();
    for entry in fs::read_dir(lora_dir).map_err(io_err(lora_dir))? {
        let path = entry.map_err(io_err(lora_dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(layer) = name.strip_prefix("lora_B_").and_then(|n| n.strip_suffix(".ovot")) {
            lora_files.push((layer.to_string(), path.clone()));
        }
    }
    lora_files.sort();
    let mut bank = LoraBankB::new(head.dim());
    for (layer, path) in lora_files {
        bank.push(layer, read_tensor(&path)?.to_matrix()?);
    }
    Ok(Model { bank, head })
}

pub fn load_features(data: &Path, video_id: &str) -> Result<DMatrix<f64>, PipelineError> {
    let load = || -> Result<DMatrix<f64>, PipelineError> { Ok(read_tensor(features_path(data, video_id))?.to_matrix()?) };
    load().map_err(in_video(video_id))
}

/// Source center over the training split of `manifest`.
pub fn compute_source_center(
    data: &Path,
    manifest: &Manifest,
    which: SourceFeatures,
) -> Result<DVector<f64>, PipelineError> {
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for row in manifest.rows().iter().filter(|r| r.split == Some(Split::Train)) {
        let feats = load_features(data, &row.video_id)?;
        let take = match which {
            SourceFeatures::FirstView => feats.nrows().min(1),
            SourceFeatures::AllViews => feats.nrows(),
        };
        rows.extend((0..take).map(|i| feats.row(i).transpose()));
    }
    let d = rows.first().ok_or(PipelineError::NoSourceVideos)?.len();
    let mut stacked = DMatrix::zeros(rows.len(), d);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(LaterError::DimensionMismatch { expected: d, actual: r.len() }.into());
        }
        stacked.set_row(i, &r.transpose());
    }
    Ok(source_center(&stacked)?)
}

pub struct EvalRequest<'a> {
    pub data: &'a Path,
    pub manifest: &'a Manifest,
    pub model: &'a Model,
    pub source_center: &'a DVector<f64>,
    pub split: Split,
    pub mode: CorrectionMode,
    pub later: LaterConfig,
    pub method: String,
}

/// Evaluate one split as an ordered stream, in manifest order, with a fresh
/// target queue.
pub fn run_eval(req: &EvalRequest<'_>) -> Result<(SplitEval, Vec<VideoPrediction>), PipelineError> {
    let anchor = build_anchor(&req.model.bank, req.later.sv_threshold_rel)?;
    let state = CenterState::new(req.source_center.clone(), req.later.alpha, req.later.queue_capacity)?;
    let head = &req.model.head;
    let mut eval = StreamEvaluator::new(state, &anchor, head, req.mode)?;

    let mut result = SplitEval::new(req.method.clone(), req.split);
    result.config = serde_json::json!({
        "mode": req.mode,
        "later": req.later,
        "anchor_rank": anchor.rank(),
    });
    let mut predictions = Vec::new();
    for row in req.manifest.rows().iter().filter(|r| r.split == Some(req.split)) {
        let label = head.class_index(&row.class_label).ok_or_else(|| PipelineError::UnknownClass {
            video_id: row.video_id.clone(),
            class_label: row.class_label.clone(),
        })?;
        let views = load_features(req.data, &row.video_id)?;
        let (pred, _) = eval.step(&views).map_err(|e| in_video(&row.video_id)(e.into()))?;
        result.record(&row.class_label, pred.predicted == label);
        predictions.push(VideoPrediction {
            video_id: row.video_id.clone(),
            predicted: pred.predicted,
            label: Some(label),
        });
    }
    Ok((result, predictions))
}

/// One JSON object per line: video id, predicted class and label.
pub fn write_predictions(predictions: &[VideoPrediction], head: &ClassifierHead, path: &Path) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for p in predictions {
        let line = serde_json::json!({
            "video_id": p.video_id,
            "predicted": head.class_names()[p.predicted],
            "label": p.label.map(|l| head.class_names()[l].clone()),
        });
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}
