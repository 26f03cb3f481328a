//! `eval`: metrics over estimation results against dataset ground truth.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use semshape::eval::{
    error_colors, iou3d, nocs_error_map, pose_error, recon_table, Metric, MetricReport, PoseError,
    ReconTable, SceneMetrics,
};
use semshape::geometry::chamfer_distance;
use semshape::io::{read_ply, write_ply};
use semshape::{SemanticCloud, Space};

use crate::config::RunConfig;
use crate::dataset::{commit_dir, staging_path, Dataset};
use crate::error::{CliError, CliResult};
use crate::estimate::{
    keypoints_nocs_ply, keypoints_ply, recon_ply, scene_json, ResultsIndex, SceneResult, INDEX_FILE,
};
use crate::json::{combine_hashes, read_json, write_bytes, write_json, Provenance};

pub const REPORT_FILE: &str = "report.json";

/// Per-scene metrics as written to the report; failed scenes have no errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene_id: String,
    pub category_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub rot_deg: Option<f64>,
    pub trans_m: Option<f64>,
    pub iou: f64,
    pub recon_cd: Option<f64>,
    pub nocs_rms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub provenance: Provenance,
    pub report: MetricReport,
    pub recon: Option<ReconTable>,
    pub scenes: Vec<SceneRow>,
}

fn cloud(points: Vec<nalgebra::Point3<f64>>, space: Space) -> CliResult<SemanticCloud> {
    Ok(SemanticCloud::from_points(points, space)?)
}

fn evaluate_scene(
    ds: &Dataset,
    dir: &Path,
    id: &str,
    errors_dir: Option<&Path>,
) -> CliResult<SceneRow> {
    let res: SceneResult = read_json(&scene_json(dir, id))?;
    let gt_rec = ds
        .scene(id)
        .map_err(|e| CliError::Input(format!("missing ground truth for `{id}`: {e}")))?;
    let mut row = SceneRow {
        scene_id: id.to_string(),
        category_id: ds.category_id().to_string(),
        failure: res.error.as_ref().map(|f| f.tag.clone()),
        rot_deg: None,
        trans_m: None,
        iou: 0.0,
        recon_cd: None,
        nocs_rms: None,
    };
    if !res.is_ok() {
        return Ok(row);
    }
    let gt = gt_rec.gt_pose()?;
    let pred = res.pose()?;
    let e = pose_error(&pred, &gt, ds.record.symmetry)?;
    row.rot_deg = Some(e.rot_deg);
    row.trans_m = Some(e.trans_m);
    row.iou = iou3d(&pred, &gt)?.iou;

    let inst = ds.instance_cloud(ds.instance_by_id(&gt_rec.instance_id)?)?;
    let recon = cloud(read_ply(recon_ply(dir, id))?, Space::Nocs)?;
    let full = cloud(inst.points().to_vec(), Space::Nocs)?;
    row.recon_cd = Some(chamfer_distance(&recon, &full, true, true)?);

    let kp = cloud(read_ply(keypoints_ply(dir, id))?, Space::Camera)?;
    let kp_nocs = cloud(read_ply(keypoints_nocs_ply(dir, id))?, Space::Nocs)?;
    let m = nocs_error_map(&kp_nocs, &kp, &gt)?;
    row.nocs_rms = Some(m.rms);
    if let Some(d) = errors_dir {
        write_ply(
            d.join(format!("{id}.ply")),
            kp_nocs.points(),
            Some(&error_colors(&m.errors)),
        )?;
    }
    Ok(row)
}

fn scene_metrics(r: &SceneRow) -> SceneMetrics {
    SceneMetrics {
        category: r.category_id.clone(),
        error: PoseError {
            rot_deg: r.rot_deg.unwrap_or(f64::INFINITY),
            trans_m: r.trans_m.unwrap_or(f64::INFINITY),
        },
        iou: r.iou,
        recon_cd: r.recon_cd,
        nocs_rms: r.nocs_rms,
    }
}

/// Evaluates every results directory against the datasets holding its
/// ground truth and writes CSV, JSON and SVG reports to `out`.
pub fn evaluate(
    results: &[PathBuf],
    datasets: &[PathBuf],
    cfg: &RunConfig,
    out: &Path,
) -> CliResult<ReportFile> {
    let mut by_cat: HashMap<String, Dataset> = HashMap::new();
    for d in datasets {
        let ds = Dataset::load(d)?;
        by_cat.insert(ds.category_id().to_string(), ds);
    }
    let staging = staging_path(out);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
    }
    let errors_dir = cfg.eval.error_plys.then(|| staging.join("errors"));
    if let Some(d) = &errors_dir {
        fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    let result = (|| {
        let mut rows = Vec::new();
        let mut hashes = BTreeMap::new();
        for dir in results {
            let index: ResultsIndex = read_json(&dir.join(INDEX_FILE))?;
            let ds = by_cat.get(&index.category_id).ok_or_else(|| {
                CliError::Input(format!(
                    "missing ground truth: no dataset for category `{}`",
                    index.category_id
                ))
            })?;
            if index.provenance.dataset_hash != ds.manifest_hash {
                return Err(CliError::Input(format!(
                    "{} was produced from a different `{}` dataset",
                    dir.display(),
                    index.category_id
                )));
            }
            hashes.insert(index.category_id.clone(), ds.manifest_hash.clone());
            let part = index
                .scenes
                .par_iter()
                .map(|e| evaluate_scene(ds, dir, &e.scene_id, errors_dir.as_deref()))
                .collect::<CliResult<Vec<_>>>()?;
            rows.extend(part);
        }
        let metrics: Vec<SceneMetrics> = rows.iter().map(scene_metrics).collect();
        let report = MetricReport::from_scenes(&metrics)?;
        let mut cds: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &rows {
            if let Some(cd) = r.recon_cd {
                cds.entry(r.category_id.clone()).or_default().push(cd);
            }
        }
        let recon = if cds.is_empty() {
            None
        } else {
            Some(recon_table(&cds)?)
        };
        let prov = Provenance {
            config_hash: cfg.hash(),
            dataset_hash: combine_hashes(hashes.values().map(String::as_str)),
            model_hash: None,
        };
        write_bytes(
            &staging.join("report.csv"),
            (prov.csv_comment() + &report.to_csv()).as_bytes(),
        )?;
        if let Some(t) = &recon {
            write_bytes(
                &staging.join("recon.csv"),
                (prov.csv_comment() + &t.to_csv()).as_bytes(),
            )?;
        }
        for m in Metric::ALL {
            write_bytes(
                &staging.join("plots").join(format!("{}.svg", m.slug())),
                report.to_svg(m).as_bytes(),
            )?;
        }
        let file = ReportFile {
            provenance: prov,
            report,
            recon,
            scenes: rows,
        };
        write_json(&staging.join(REPORT_FILE), &file)?;
        Ok(file)
    })();
    match result {
        Ok(f) => {
            commit_dir(&staging, out, REPORT_FILE)?;
            Ok(f)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}
