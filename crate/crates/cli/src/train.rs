//! `train` and `build-proto`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use semshape::semantics::{
    attach_semantic_prototype, export_feature_pca, transfer_semantics, DescriptorCloud,
    DescriptorSource,
};
use semshape::shape::{
    load_model, model_to_bytes, train_category_model, EpochRecord, LinearShapeModel, ShapeParams,
};
use semshape::SemanticCloud;

use crate::config::RunConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{CliError, CliResult};
use crate::json::{read_json, sha256_hex, write_bytes, write_json, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceParams {
    pub instance_id: String,
    pub coeffs: Vec<f64>,
    pub scale: [f64; 3],
    pub final_cd: f64,
}

impl InstanceParams {
    pub fn shape_params(&self) -> ShapeParams {
        ShapeParams {
            coeffs: self.coeffs.clone(),
            scale: Vector3::from(self.scale),
        }
    }
}

/// Stage-1 parameters written next to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub provenance: Provenance,
    pub category_id: String,
    pub instances: Vec<InstanceParams>,
}

pub fn params_path(model: &Path) -> PathBuf {
    model.with_extension("params.json")
}

pub fn log_path(model: &Path) -> PathBuf {
    model.with_extension("log.csv")
}

/// Writes `bytes` beside `path` and renames it into place, so an existing
/// file survives any failure.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("partial");
    write_bytes(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn dense_clouds(clouds: Vec<SemanticCloud>, k_agg: usize) -> CliResult<Vec<DescriptorCloud>> {
    Ok(clouds
        .into_iter()
        .map(|c| DescriptorCloud::new(c, DescriptorSource::Ingested, k_agg))
        .collect::<semshape::Result<_>>()?)
}

fn log_csv(prov: &Provenance, log: &[EpochRecord]) -> String {
    let mut s = prov.csv_comment();
    s.push_str("epoch,loss,active_basis\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.epoch, r.loss, r.active_basis);
    }
    s
}

pub struct TrainSummary {
    pub model_hash: String,
    pub final_loss: f64,
    pub mean_cd: f64,
}

/// Trains on the dataset's training split, attaches the semantic prototype
/// and writes the model, its parameter sidecar and the training log.
pub fn train(dataset: &Path, cfg: &RunConfig, k_agg: usize, out: &Path) -> CliResult<TrainSummary> {
    cfg.train.validate()?;
    let ds = Dataset::load(dataset)?;
    let recs: Vec<_> = ds.instances(Split::Train).cloned().collect();
    let clouds = recs
        .iter()
        .map(|r| ds.instance_cloud(r))
        .collect::<CliResult<Vec<_>>>()?;
    let trained =
        train_category_model(ds.category_id(), &clouds, &cfg.train).map_err(|e| match e {
            semshape::Error::Numerical(m) => CliError::Numerical(format!("training diverged: {m}")),
            e => e.into(),
        })?;
    let mut model = trained.model;
    let fitted: Vec<ShapeParams> = trained.fits.iter().map(|f| f.params.clone()).collect();
    attach_semantic_prototype(&mut model, &fitted, &dense_clouds(clouds, k_agg)?)?;

    let bytes = model_to_bytes(&model);
    let model_hash = sha256_hex(&bytes);
    let prov = Provenance {
        config_hash: cfg.hash(),
        dataset_hash: ds.manifest_hash.clone(),
        model_hash: Some(model_hash.clone()),
    };
    let params = ParamsFile {
        provenance: prov.clone(),
        category_id: ds.category_id().to_string(),
        instances: recs
            .iter()
            .zip(&trained.fits)
            .map(|(r, f)| InstanceParams {
                instance_id: r.id.clone(),
                coeffs: f.params.coeffs.clone(),
                scale: f.params.scale.into(),
                final_cd: f.final_cd,
            })
            .collect(),
    };
    write_atomic(out, &bytes)?;
    write_json(&params_path(out), &params)?;
    write_bytes(&log_path(out), log_csv(&prov, &trained.log).as_bytes())?;
    let n = trained.fits.len() as f64;
    Ok(TrainSummary {
        model_hash,
        final_loss: trained.log.last().map_or(f64::NAN, |r| r.loss),
        mean_cd: trained.fits.iter().map(|f| f.final_cd).sum::<f64>() / n,
    })
}

/// Rebuilds the semantic prototype of a trained model from the dataset's
/// descriptor sidecars; optionally writes PCA-colored reconstructions.
pub fn build_proto(
    dataset: &Path,
    model_path: &Path,
    k_agg: usize,
    out: &Path,
    pca_out: Option<&Path>,
) -> CliResult<LinearShapeModel> {
    let ds = Dataset::load(dataset)?;
    let mut model = load_model(model_path)?;
    let params: ParamsFile = read_json(&params_path(model_path))?;
    if params.category_id != ds.category_id() {
        return Err(CliError::Input(format!(
            "model is for `{}` but the dataset holds `{}`",
            params.category_id,
            ds.category_id()
        )));
    }
    let clouds = params
        .instances
        .iter()
        .map(|p| ds.instance_cloud(ds.instance_by_id(&p.instance_id)?))
        .collect::<CliResult<Vec<_>>>()?;
    let fitted: Vec<ShapeParams> = params
        .instances
        .iter()
        .map(InstanceParams::shape_params)
        .collect();
    attach_semantic_prototype(&mut model, &fitted, &dense_clouds(clouds, k_agg)?)?;
    let bytes = model_to_bytes(&model);
    write_atomic(out, &bytes)?;
    let mut sidecar = params.clone();
    sidecar.provenance.model_hash = Some(sha256_hex(&bytes));
    write_json(&params_path(out), &sidecar)?;
    if let Some(dir) = pca_out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let recons = fitted
            .iter()
            .map(|p| transfer_semantics(&model, p))
            .collect::<semshape::Result<Vec<_>>>()?;
        let paths: Vec<PathBuf> = params
            .instances
            .iter()
            .map(|p| dir.join(format!("{}.pca.ply", p.instance_id)))
            .collect();
        export_feature_pca(&recons, &paths)?;
    }
    Ok(model)
}
