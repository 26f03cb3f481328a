//! `estimate`: pose, size and shape for every scene of a dataset.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use semshape::io::write_ply;
use semshape::pose::{estimate, Estimate, StageTimings};
use semshape::shape::load_model;

use crate::config::RunConfig;
use crate::dataset::{commit_dir, staging_path, Dataset};
use crate::error::{CliError, CliResult};
use crate::json::{file_hash, write_json, Provenance};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub tag: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene_id: String,
    pub category_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inlier_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_cd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Failure>,
    /// Wall-clock stage durations; only written on request since they vary
    /// between runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_timings_ms: Option<StageTimings>,
    pub provenance: Provenance,
}

impl SceneResult {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn pose(&self) -> CliResult<semshape::Pose> {
        match (&self.rotation, &self.translation, &self.size) {
            (Some(r), Some(t), Some(s)) => Ok(semshape::Pose::try_from(
                &semshape::transform::PoseRecord {
                    rotation: *r,
                    translation: *t,
                    size: *s,
                },
            )?),
            _ => Err(CliError::Input(format!(
                "scene `{}` has no pose",
                self.scene_id
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsIndex {
    pub provenance: Provenance,
    pub category_id: String,
    pub succeeded: usize,
    pub failed: usize,
    pub scenes: Vec<IndexEntry>,
}

pub fn scene_json(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("scenes").join(format!("{id}.json"))
}
pub fn recon_ply(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("recon").join(format!("{id}.ply"))
}
pub fn keypoints_ply(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("keypoints").join(format!("{id}.ply"))
}
pub fn keypoints_nocs_ply(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("keypoints").join(format!("{id}.nocs.ply"))
}

/// Runs the pose pipeline on every scene in parallel; output order follows
/// the dataset's scene list. Fails only when every scene fails.
pub fn estimate_dataset(
    dataset: &Path,
    model_path: &Path,
    cfg: &RunConfig,
    out: &Path,
    timings: bool,
) -> CliResult<ResultsIndex> {
    cfg.solver.validate()?;
    let ds = Dataset::load(dataset)?;
    let model = load_model(model_path)?;
    if model.category_id() != ds.category_id() {
        return Err(CliError::Input(format!(
            "model is for `{}` but the dataset holds `{}`",
            model.category_id(),
            ds.category_id()
        )));
    }
    let prov = Provenance {
        config_hash: cfg.hash(),
        dataset_hash: ds.manifest_hash.clone(),
        model_hash: Some(file_hash(model_path)?),
    };
    let staging = staging_path(out);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
    }
    for sub in ["scenes", "recon", "keypoints"] {
        fs::create_dir_all(staging.join(sub)).map_err(|e| CliError::io(&staging, e))?;
    }

    let entries = ds
        .record
        .scenes
        .par_iter()
        .map(|id| -> CliResult<IndexEntry> {
            let partial = ds.scene_partial(id)?;
            let outcome = estimate(&partial, &model, &cfg.train, &cfg.solver);
            let mut res = SceneResult {
                scene_id: id.clone(),
                category_id: ds.category_id().to_string(),
                rotation: None,
                translation: None,
                size: None,
                inlier_ratio: None,
                fit_cd: None,
                error: None,
                stage_timings_ms: None,
                provenance: prov.clone(),
            };
            match outcome {
                Ok(est) => {
                    write_artifacts(&staging, id, &est)?;
                    let rec = semshape::transform::PoseRecord::from(&est.pose);
                    res.rotation = Some(rec.rotation);
                    res.translation = Some(rec.translation);
                    res.size = Some(rec.size);
                    res.inlier_ratio = Some(est.diagnostics.inlier_ratio);
                    res.fit_cd = Some(est.fit_cd);
                    res.stage_timings_ms = timings.then_some(est.timings);
                }
                Err(e) => {
                    res.error = Some(Failure {
                        stage: e.stage.name().to_string(),
                        tag: e.source.tag().to_string(),
                        message: e.source.to_string(),
                    });
                }
            }
            write_json(&scene_json(&staging, id), &res)?;
            Ok(IndexEntry {
                scene_id: id.clone(),
                error_tag: res.error.map(|f| f.tag),
            })
        })
        .collect::<CliResult<Vec<_>>>();
    let entries = match entries {
        Ok(e) => e,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    let failed = entries.iter().filter(|e| e.error_tag.is_some()).count();
    let index = ResultsIndex {
        provenance: prov,
        category_id: ds.category_id().to_string(),
        succeeded: entries.len() - failed,
        failed,
        scenes: entries,
    };
    write_json(&staging.join(INDEX_FILE), &index)?;
    commit_dir(&staging, out, INDEX_FILE)?;
    if failed > 0 && failed == index.scenes.len() {
        return Err(CliError::Numerical(format!("all {failed} scenes failed")));
    }
    Ok(index)
}

fn write_artifacts(dir: &Path, id: &str, est: &Estimate) -> CliResult<()> {
    write_ply(recon_ply(dir, id), est.reconstruction.points(), None)?;
    write_ply(keypoints_ply(dir, id), est.keypoints.points(), None)?;
    write_ply(keypoints_nocs_ply(dir, id), &est.keypoint_nocs, None)?;
    Ok(())
}
