//! Run configuration: every section has defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semshape::geometry::{DEFAULT_TAU1, DEFAULT_TAU2};
use semshape::pose::SolverConfig;
use semshape::seed::derive;
use semshape::shape::TrainConfig;
use semshape::synth::{CategorySpec, Family, SceneParams};

use crate::error::{CliError, CliResult};
use crate::json::{parse_json, sha256_hex, to_json_bytes};

fn default_held_out() -> usize {
    5
}

/// One category to generate: instances, the held-out split and test scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub category: CategorySpec,
    /// Trailing instances kept out of training; scenes are rendered from them.
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    #[serde(default)]
    pub scenes: usize,
    #[serde(default)]
    pub scene: SceneParams,
}

impl DatasetSpec {
    pub fn new(category: CategorySpec, held_out: usize, scenes: usize) -> Self {
        Self {
            category,
            held_out,
            scenes,
            scene: SceneParams::default(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.category.validate()?;
        let n = self.category.instance_count;
        if self.held_out >= n - 1 {
            return Err(CliError::Input(format!(
                "held_out = {} leaves fewer than 2 of {n} instances for training",
                self.held_out
            )));
        }
        if self.scenes > 0 && self.held_out == 0 {
            return Err(CliError::Input(
                "scenes need at least one held-out instance".into(),
            ));
        }
        Ok(())
    }
}

/// Reads a dataset spec, or a bare category spec with default split and no scenes.
pub fn read_dataset_spec(path: &Path) -> CliResult<DatasetSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: serde_json::Value = parse_json(path, &text)?;
    if value.get("family").is_some() {
        let category: CategorySpec = parse_json(path, &text)?;
        let held_out = default_held_out().min(category.instance_count.saturating_sub(2));
        Ok(DatasetSpec::new(category, held_out, 0))
    } else {
        parse_json(path, &text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub categories: Vec<DatasetSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            categories: vec![DatasetSpec::new(
                CategorySpec::new(Family::Bottle, 25, 0),
                5,
                100,
            )],
        }
    }
}

fn default_tau1() -> f64 {
    DEFAULT_TAU1
}
fn default_tau2() -> f64 {
    DEFAULT_TAU2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Outlier threshold of the object-aware keypoint terms, NOCS units.
    #[serde(default = "default_tau1")]
    pub tau1: f64,
    /// Hinge distance of the keypoint diversity term.
    #[serde(default = "default_tau2")]
    pub tau2: f64,
    /// Write a colored keypoint NOCS error PLY per scene.
    #[serde(default)]
    pub error_plys: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau1: DEFAULT_TAU1,
            tau2: DEFAULT_TAU2,
            error_plys: false,
        }
    }
}

/// Weights of the learned pose network's loss terms. The network is not
/// part of this toolkit, so they are carried for completeness and unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
}

impl Default for PoseLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 2.0,
            lambda3: 15.0,
            lambda4: 0.3,
            lambda5: 0.3,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}
fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub pose_loss_weights: PoseLossWeights,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
            eval: EvalConfig::default(),
            pose_loss_weights: PoseLossWeights::default(),
            output_dir: default_output_dir(),
            seed: default_seed(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => crate::json::read_json(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        self.solver.validate()?;
        for d in &self.dataset.categories {
            d.validate()?;
        }
        let mut ids: Vec<String> = self
            .dataset
            .categories
            .iter()
            .map(|d| d.category.id())
            .collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Input("category ids must be unique".into()));
        }
        if !(self.eval.tau1 > 0.0 && self.eval.tau2 > 0.0) {
            return Err(CliError::Input("tau1 and tau2 must be positive".into()));
        }
        Ok(())
    }

    /// Makes the master seed the only source of randomness: it seeds
    /// training and RANSAC, and category `i` is generated from `derive(seed, i)`.
    pub fn resolve_seeds(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.solver.seed = self.seed;
        for (i, d) in self.dataset.categories.iter_mut().enumerate() {
            d.category.seed = derive(self.seed, i as u64);
        }
    }

    /// Hash of the resolved configuration, independent of where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(&to_json_bytes(&c))
    }
}
