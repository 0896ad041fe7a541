use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use edov_core::error::Error;
use edov_core::pipeline::{self, ExperimentConfig, RunManifest, Stage};

#[derive(Parser)]
#[command(
    name = "edov",
    about = "Embed dataset-ownership identifiers, run the evasion pipeline, and verify"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output/working directory for artifacts
    #[arg(long)]
    out: PathBuf,
    /// Override every stage seed (adds a fixed per-stage offset)
    #[arg(long)]
    seed: Option<u64>,
    /// Re-run stages even when cached artifacts match
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Embed the configured identifier into the dataset
    Mark(RunArgs),
    /// Train the teacher on the marked dataset
    TrainTeacher(RunArgs),
    /// Build (or reuse) the gallery feature bank
    Bank(RunArgs),
    /// Curate the transfer set
    Curate(RunArgs),
    /// Generate the perturbation pool
    GenPool(RunArgs),
    /// Search the corruption chain
    GenChain(RunArgs),
    /// Distill the student over the transfer set
    Distill(RunArgs),
    /// Verify teacher and student against the identifier
    Verify(RunArgs),
    /// Run every stage and print the report
    Pipeline {
        #[command(flatten)]
        args: RunArgs,
        /// Stop after the named stage (data|mark|teacher|bank|curate|pool|chain|distill|verify)
        #[arg(long)]
        stage: Option<String>,
    },
    /// Print the report for an existing run directory
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run_to(args: &RunArgs, stop: Option<Stage>) -> Result<RunManifest, Error> {
    let cfg = load_config(args)?;
    pipeline::run_pipeline(&cfg, &args.out, args.force, stop)
}

fn execute() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Mark(args) => {
            run_to(&args, Some(Stage::Mark))?;
            println!("marked dataset written to {}", args.out.display());
        }
        Command::TrainTeacher(args) => {
            run_to(&args, Some(Stage::Teacher))?;
            println!("teacher checkpoint written to {}", args.out.display());
        }
        Command::Bank(args) => {
            run_to(&args, Some(Stage::Bank))?;
            println!("feature bank written to {}", args.out.display());
        }
        Command::Curate(args) => {
            run_to(&args, Some(Stage::Curate))?;
            println!("transfer set written to {}", args.out.display());
        }
        Command::GenPool(args) => {
            run_to(&args, Some(Stage::Pool))?;
            println!("perturbation pool written to {}", args.out.display());
        }
        Command::GenChain(args) => {
            run_to(&args, Some(Stage::Chain))?;
            println!("corruption chain written to {}", args.out.display());
        }
        Command::Distill(args) => {
            run_to(&args, Some(Stage::Distill))?;
            println!("student checkpoint written to {}", args.out.display());
        }
        Command::Verify(args) => {
            let manifest = run_to(&args, None)?;
            let (human, _) = pipeline::report(&manifest)?;
            print!("{human}");
        }
        Command::Pipeline { args, stage } => {
            let stop = match &stage {
                Some(s) => Some(Stage::parse(s)?),
                None => None,
            };
            let manifest = run_to(&args, stop)?;
            if manifest.finished {
                let (human, json) = pipeline::report(&manifest)?;
                print!("{human}");
                let report_path = args.out.join("report.json");
                pipeline::atomic_write(&report_path, &serde_json::to_vec_pretty(&json)?)?;
                println!("report written to {}", report_path.display());
            } else {
                println!("stopped after stage {:?}", stage.unwrap_or_default());
            }
        }
        Command::Report { out } => {
            let manifest = RunManifest::load(&out)?;
            let (human, json) = pipeline::report(&manifest)?;
            print!("{human}");
            let report_path = out.join("report.json");
            pipeline::atomic_write(&report_path, &serde_json::to_vec_pretty(&json)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) | Err(e @ Error::MissingPath(_)) => {
            eprintln!("validation error: {e}");
            ExitCode::from(2)
        }
        Err(e @ Error::Stage { .. }) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
