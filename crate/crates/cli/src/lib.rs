//! Command-line orchestration of the clustering pipeline.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod stages;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use config::{PipelineConfig, ReportStage, StageDef, StageKind};
use error::{CliError, CliResult};
use pipeline::{RunOptions, StageStatus};

#[derive(Debug, Parser)]
#[command(name = "fclust", version, about = "Clustering benchmarks over precomputed features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Pipeline config (`run`) or single stage config (other subcommands).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; every stage writes into `<out>/<stage name>`.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Run every stage of a pipeline config.
    Run,
    /// Validate and copy features, labels and optional extras into the store.
    Ingest,
    /// Write a synthetic blob fixture.
    Synth,
    /// Build a benchmark subset.
    Bench,
    /// Mine exact nearest neighbors.
    Knn,
    /// Fit spherical k-means and predict.
    Kmeans,
    /// Train TEMI or SCAN heads and predict.
    Train,
    /// Relabel with zero-shot hierarchy refinement.
    Refine,
    /// Linear probe with a learning-rate and weight-decay grid.
    Probe,
    /// Evaluate a prediction set.
    Eval,
    /// Consolidate evaluation reports into one table.
    Report {
        /// Directory to search; defaults to the output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

impl Command {
    fn stage_kind(&self) -> Option<&'static str> {
        Some(match self {
            Command::Run => return None,
            Command::Ingest => "ingest",
            Command::Synth => "synth",
            Command::Bench => "bench",
            Command::Knn => "knn",
            Command::Kmeans => "kmeans",
            Command::Train => "train",
            Command::Refine => "refine",
            Command::Probe => "probe",
            Command::Eval => "eval",
            Command::Report { .. } => "report",
        })
    }
}

/// Parses a single stage object for subcommand `kind`; `stage` and `name`
/// default to the subcommand.
pub fn single_stage_config(kind: &str, text: &str) -> CliResult<PipelineConfig> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::validation("stage config must be a JSON object"))?;
    match obj.get("stage").and_then(|v| v.as_str()) {
        Some(k) if k != kind => {
            return Err(CliError::validation(format!("config is a {k:?} stage, not {kind:?}")));
        }
        _ => {}
    }
    obj.insert("stage".into(), kind.into());
    obj.entry("name").or_insert_with(|| kind.into());
    let def: StageDef = serde_json::from_value(value).map_err(|e| CliError::validation(format!("config: {e}")))?;
    Ok(PipelineConfig {
        seed: 0,
        stages: vec![def],
    })
}

fn read_config(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|_| CliError::missing_path(path, None))
}

fn config_base(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Executes a parsed command line.
pub fn execute(cli: &Cli) -> CliResult<Vec<(String, StageStatus)>> {
    let mut opts = RunOptions {
        out: cli.out.clone(),
        base: PathBuf::from("."),
        threads: cli.threads,
        seed: cli.seed,
        external_refs: false,
    };
    if cli.threads == Some(0) {
        return Err(CliError::validation("--threads must be at least 1"));
    }
    let cfg = match (&cli.command, &cli.config) {
        (Command::Run, Some(path)) => {
            opts.base = config_base(path);
            PipelineConfig::parse(&read_config(path)?)?
        }
        (Command::Run, None) => return Err(CliError::validation("run needs --config")),
        (Command::Report { dir }, None) => {
            opts.base = std::env::current_dir().map_err(|e| CliError::validation(e.to_string()))?;
            PipelineConfig {
                seed: 0,
                stages: vec![StageDef {
                    name: "report".into(),
                    seed: None,
                    kind: StageKind::Report(ReportStage {
                        dir: dir.as_ref().map(|d| d.display().to_string()),
                    }),
                }],
            }
        }
        (cmd, Some(path)) => {
            opts.base = config_base(path);
            opts.external_refs = true;
            single_stage_config(cmd.stage_kind().unwrap_or_default(), &read_config(path)?)?
        }
        (cmd, None) => {
            return Err(CliError::validation(format!(
                "{} needs --config",
                cmd.stage_kind().unwrap_or("run")
            )))
        }
    };
    pipeline::run(&cfg, &opts)
}
