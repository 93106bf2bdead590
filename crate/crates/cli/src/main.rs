//! Pipeline driver: one subcommand per stage, a JSON config file, dotted
//! `--set` overrides, and stable exit codes (1 config error, 2 missing
//! upstream artifact, 3 runtime/training error).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neurotune::pipeline::{self, PipelineConfig, ARTIFACT_DIR_ENV};

#[derive(Parser)]
#[command(
    name = "neurotune",
    about = "Security-neuron identification, clustering, and cluster-tied selective fine-tuning on a synthetic code corpus",
    version
)]
struct Cli {
    /// Pipeline configuration file (JSON, schema config-v1). Defaults to the
    /// built-in golden configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set finetune.epochs=3 or
    /// --set eval.seeds=[0,1]. May be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Artifact directory (overrides config and NEUROTUNE_ARTIFACT_DIR).
    #[arg(long, global = true)]
    artifact_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the paired secure/insecure corpus, the benign corpus, and
    /// the identification/fine-tune/evaluation split
    GenCorpus,
    /// Train the base model on the mixed corpus and save its checkpoint
    Pretrain,
    /// Accumulate gradient importance and select the per-layer top-k
    /// security neurons
    Identify,
    /// Cluster selected neurons per layer with the silhouette gate
    Cluster,
    /// Train the cluster-tied delta on secure samples and fold it back
    Finetune,
    /// Run the treatment benchmark over the held-out split
    Eval,
    /// Aggregate evaluation reports into summary JSON and CSV
    Report,
    /// Export (layer, neuron, importance, cluster) rows as CSV
    ExportClusters,
}

impl Command {
    fn stage(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Pretrain => "pretrain",
            Command::Identify => "identify",
            Command::Cluster => "cluster",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Report => "report",
            Command::ExportClusters => "export-clusters",
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, neurotune::Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::golden(),
    };
    for assignment in &cli.overrides {
        cfg.apply_override(assignment)?;
    }
    if let Ok(dir) = std::env::var(ARTIFACT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.artifact_dir = PathBuf::from(dir);
        }
    }
    if let Some(dir) = &cli.artifact_dir {
        cfg.artifact_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code_for(err: &neurotune::Error) -> u8 {
    match err {
        neurotune::Error::Config(_) | neurotune::Error::Json(_) => 1,
        neurotune::Error::MissingArtifact(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(exit_code_for(&err));
        }
    };
    let stage = cli.command.stage();
    match pipeline::run_stage(stage, &cfg) {
        Ok(()) => {
            eprintln!("{stage}: ok ({})", cfg.artifact_dir.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
