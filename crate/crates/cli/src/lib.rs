//! Command-line front end: reproducible batch runs over synthetic categories.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod error;
pub mod estimate;
pub mod evaluate;
pub mod json;
pub mod train;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use semshape::semantics::DEFAULT_K_AGG;

use config::{read_dataset_spec, RunConfig};
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "semshape",
    version,
    about = "Semantic shape models and NOCS pose recovery"
)]
pub struct Cli {
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic category with held-out scenes.
    Gen {
        /// Dataset spec, or a bare category spec.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the category seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a shape model on a dataset's training split and attach its semantic prototype.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Run config; only its `train` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output `.dlsm`; `.params.json` and `.log.csv` are written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rebuild a model's semantic prototype from a dataset's descriptors.
    BuildProto {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Neighbors averaged per prototype point.
        #[arg(long, default_value_t = DEFAULT_K_AGG)]
        k_agg: usize,
        /// Directory for PCA-colored reconstructions of the training instances.
        #[arg(long)]
        pca_out: Option<PathBuf>,
    },
    /// Estimate pose, size and shape for every scene of a dataset.
    Estimate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Record per-stage wall-clock timings in the results.
        #[arg(long)]
        timings: bool,
    },
    /// Score estimation results against ground truth.
    Eval {
        #[arg(long, required = true)]
        results: Vec<PathBuf>,
        #[arg(long, required = true)]
        dataset: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write colored keypoint NOCS error PLYs.
        #[arg(long)]
        error_plys: bool,
    },
    /// Generate, train, estimate and evaluate every configured category.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        timings: bool,
    },
}

fn run_config(path: Option<&std::path::Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.solver.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Input("--jobs must be positive".into()));
        }
        // only fails if a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match cli.command {
        Command::Gen { config, out, seed } => {
            let mut spec = read_dataset_spec(&config)?;
            if let Some(s) = seed {
                spec.category.seed = s;
            }
            let hash = dataset::generate_dataset(&spec, &out)?;
            println!(
                "generated {} instances and {} scenes of {} in {} (manifest {hash})",
                spec.category.instance_count,
                spec.scenes,
                spec.category.id(),
                out.display()
            );
        }
        Command::Train {
            dataset,
            config,
            out,
            seed,
        } => {
            let cfg = run_config(config.as_deref(), seed)?;
            let s = train::train(&dataset, &cfg, DEFAULT_K_AGG, &out)?;
            println!(
                "trained {} (final loss {:.6e}, mean instance CD {:.6e}, model {})",
                out.display(),
                s.final_loss,
                s.mean_cd,
                s.model_hash
            );
        }
        Command::BuildProto {
            dataset,
            model,
            out,
            k_agg,
            pca_out,
        } => {
            let m = train::build_proto(&dataset, &model, k_agg, &out, pca_out.as_deref())?;
            println!(
                "semantic prototype {}x{} written to {}",
                m.num_points(),
                m.descriptor_dim(),
                out.display()
            );
        }
        Command::Estimate {
            dataset,
            model,
            config,
            out,
            seed,
            timings,
        } => {
            let cfg = run_config(config.as_deref(), seed)?;
            let idx = estimate::estimate_dataset(&dataset, &model, &cfg, &out, timings)?;
            println!("{} scenes estimated, {} failed", idx.succeeded, idx.failed);
        }
        Command::Eval {
            results,
            dataset,
            config,
            out,
            error_plys,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.eval.error_plys |= error_plys;
            let f = evaluate::evaluate(&results, &dataset, &cfg, &out)?;
            print!("{}", f.report.to_csv());
        }
        Command::Bench {
            config,
            out,
            seed,
            timings,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.resolve_seeds(seed);
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            cfg.output_dir = out.clone();
            let f = bench::bench(&cfg, &out, timings)?;
            print!("{}", f.report.to_csv());
        }
    }
    Ok(())
}
