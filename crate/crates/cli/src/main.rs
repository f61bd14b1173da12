use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fpds_core::pipeline::{self, PipelineConfig, PipelineError};

/// FDG-PET DAT score pipeline.
#[derive(Parser, Debug)]
#[command(name = "fpds", version)]
struct Cli {
    /// JSON configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, applied after the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Dotted-key override such as `ensemble.subsets=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assign every image its stratum and trajectory.
    Stratify,
    /// Normalize, smooth, parcellate and write patch SUVR features.
    Extract,
    /// Train the ensemble on baseline sNC and sDAT images.
    Train,
    /// Score every image (out-of-bag for training images).
    Score,
    /// Write the evaluation reports.
    Evaluate,
    /// Generate a synthetic atlas, cohort and volumes.
    Phantom,
    /// phantom, stratify, extract, train, score, evaluate.
    RunAll,
    /// Print the effective configuration as JSON.
    Config,
}

const NON_CONVERGED: u8 = 4;

fn config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let config = config.with_overrides(&cli.overrides)?;
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<u8, PipelineError> {
    let config = config(cli)?;
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Stratify => {
            let s = pipeline::cmd_stratify(&config)?;
            println!("{} images stratified, {} subjects excluded", s.images.len(), s.exclusions.len());
        }
        Command::Extract => {
            let s = pipeline::cmd_extract(&config)?;
            println!(
                "{} images extracted, {} failed (parcellation {})",
                s.extracted,
                s.failures.len(),
                if s.from_cache { "from cache" } else { "computed" }
            );
        }
        Command::Train => {
            let s = pipeline::cmd_train(&config)?;
            println!(
                "{} classifiers trained, {} did not converge",
                s.model.classifiers.len(),
                s.non_converged
            );
            if s.non_converged > 0 {
                return Ok(NON_CONVERGED);
            }
        }
        Command::Score => {
            let s = pipeline::cmd_score(&config)?;
            println!("{} images scored, {} not scored", s.rows.len(), s.unscored.len());
        }
        Command::Evaluate => {
            pipeline::cmd_evaluate(&config)?;
            println!("reports written to {}", config.paths.output_dir.join("reports").display());
        }
        Command::Phantom => {
            let p = pipeline::cmd_phantom(&config)?;
            println!(
                "{} subjects, {} images written to {}",
                p.records.len(),
                p.images.len(),
                config.paths.phantom_dir.display()
            );
        }
        Command::RunAll => {
            let s = pipeline::run_all(&config)?;
            println!(
                "{} images, {} scored, {} classifiers ({} not converged)",
                s.images, s.scored, s.classifiers, s.non_converged
            );
            if s.non_converged > 0 {
                return Ok(NON_CONVERGED);
            }
        }
        Command::Config => println!("{}", config.to_json()),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
