//! `bench`: generation, training, estimation and evaluation in one run.

use std::path::{Path, PathBuf};

use serde::Serialize;

use semshape::semantics::DEFAULT_K_AGG;

use crate::config::RunConfig;
use crate::dataset::generate_dataset;
use crate::error::CliResult;
use crate::estimate::estimate_dataset;
use crate::evaluate::{evaluate, ReportFile};
use crate::json::write_json;
use crate::train::train;

#[derive(Serialize)]
struct RunRecord<'a> {
    config_hash: String,
    config: &'a RunConfig,
}

/// Layout under `out`: `run.json`, `dataset/<category>`, `models/<category>.dlsm`,
/// `results/<category>` and `report`.
pub fn bench(cfg: &RunConfig, out: &Path, timings: bool) -> CliResult<ReportFile> {
    cfg.validate()?;
    write_json(
        &out.join("run.json"),
        &RunRecord {
            config_hash: cfg.hash(),
            config: cfg,
        },
    )?;
    let mut datasets: Vec<PathBuf> = Vec::new();
    let mut results: Vec<PathBuf> = Vec::new();
    for spec in &cfg.dataset.categories {
        let id = spec.category.id();
        let ds = out.join("dataset").join(&id);
        generate_dataset(spec, &ds)?;
        let model = out.join("models").join(format!("{id}.dlsm"));
        train(&ds, cfg, DEFAULT_K_AGG, &model)?;
        let res = out.join("results").join(&id);
        estimate_dataset(&ds, &model, cfg, &res, timings)?;
        datasets.push(ds);
        results.push(res);
    }
    evaluate(&results, &datasets, cfg, &out.join("report"))
}
