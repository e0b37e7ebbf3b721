//! `prefval`: command-line front end for preference-data valuation runs.
//!
//! Settings resolve in three layers: built-in defaults, then `--config`
//! (a TOML experiment file), then command-line flags. Relative output
//! paths are placed under `$PREFVAL_OUT` when it is set. Every command
//! writes a manifest of its resolved settings next to its outputs.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prefval::config::ExperimentConfig;
use prefval::data::StratKey;
use prefval::selection::{Method, SelectionBand};
use prefval::trainer::Optimizer;
use prefval::Objective;

#[derive(Parser, Debug)]
#[command(name = "prefval", version, about = "Influence-based valuation and selection of preference data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Experiment config (TOML); flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root directory for relative output paths.
    #[arg(long, global = true, env = "PREFVAL_OUT")]
    pub out_root: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub objective: Option<Objective>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
}

/// Optimizer overrides for the stage a command runs.
#[derive(Args, Debug, Clone, Default)]
pub struct StageArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<Optimizer>,
}

/// Dataset files; any split left out is generated from the config.
#[derive(Args, Debug, Clone, Default)]
pub struct SplitArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic preference dataset (JSONL).
    Gen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        flip: Option<f64>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        prompt_len: Option<usize>,
        #[arg(long)]
        response_len: Option<usize>,
        #[arg(long)]
        score_noise: Option<f64>,
        /// Clean held-out pairs (no label flips, `test` id prefix).
        #[arg(long)]
        test: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified train/validation split of a dataset.
    Split {
        #[arg(long)]
        data: PathBuf,
        /// Fraction of pairs sent to validation (default: the config's val share).
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long)]
        strat_key: Option<StratKey>,
        #[arg(long)]
        buckets: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Likelihood pretraining on chosen responses (the reference model).
    Sft {
        #[arg(long)]
        train: PathBuf,
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preference alignment with per-epoch checkpoints.
    Align {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Starting model (default: the reference).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Config section whose optimizer settings apply.
        #[arg(long, default_value = "warmup")]
        stage_name: String,
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-pair influence, LossDiff, and IRM scores as CSV.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Auxiliary validation-aligned model; trained with the `aux` stage if absent.
        #[arg(long)]
        aux: Option<PathBuf>,
        /// Checkpoint index recorded in the `epoch` column.
        #[arg(long, default_value_t = 1)]
        epoch: usize,
        /// Skip exact influence (and the TIF flag).
        #[arg(long)]
        no_if: bool,
        #[arg(long)]
        tif: Option<SelectionBand>,
        #[arg(long)]
        xi: Option<SelectionBand>,
        #[arg(long)]
        tau: Option<SelectionBand>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a selection rule to a score CSV (or a baseline to a dataset).
    Select {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Dataset for baseline methods.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        xi: Option<SelectionBand>,
        #[arg(long)]
        tau: Option<SelectionBand>,
        /// Band for `tif`, `lossdiff`, and `irm`.
        #[arg(long)]
        band: Option<SelectionBand>,
        /// Kept fraction for `random`, `score-margin`, and `oracle-margin`.
        #[arg(long, default_value_t = 0.64)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align from scratch on the pairs kept (or dropped) by a mask.
    Retrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Train on the pairs the mask drops instead.
        #[arg(long)]
        dropped: bool,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-set loss, mean margin, and rank accuracy of a model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Influence-tertile continuation traces from alignment checkpoints.
    Dynamics {
        #[command(flatten)]
        splits: SplitArgs,
        /// Checkpoint epochs to partition at (comma separated).
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Warm-up, score, select, retrain, evaluate.
    Pipeline {
        #[command(flatten)]
        splits: SplitArgs,
        #[arg(long)]
        xi: Option<SelectionBand>,
        #[arg(long)]
        tau: Option<SelectionBand>,
        #[arg(long)]
        no_if: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Pipeline reruns under flipped validation labels.
    NoiseSweep {
        #[command(flatten)]
        splits: SplitArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4")]
        rates: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Layer-wise influence of every training pair as CSV.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact leave-one-out effects next to influence (small sets only).
    Loo {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long = "lr", default_value_t = 1.0)]
        learning_rate: f64,
        /// Full batch when absent.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Checkpoint epoch at which influence is computed.
        #[arg(long, default_value_t = 1)]
        if_epoch: usize,
        #[arg(long, default_value_t = prefval::influence::DEFAULT_ORACLE_CAP)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pearson and Spearman correlation between two score columns.
    Corr {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "lossdiff")]
        x: String,
        #[arg(long, default_value = "if")]
        y: String,
    },
}

impl GlobalArgs {
    pub fn resolve_config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config_or_manifest(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.experiment.seed = s;
        }
        if let Some(o) = self.objective {
            cfg.experiment.objective = o;
        }
        if let Some(b) = self.beta {
            cfg.experiment.beta = b;
        }
        cfg.objective()?;
        Ok(cfg)
    }

    /// Output location: relative paths go under the output root if one is set.
    pub fn out(&self, path: &Path) -> PathBuf {
        match &self.out_root {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        }
    }
}

/// Reads an experiment config, or the `[config]` table of a run manifest.
fn load_config_or_manifest(path: &Path) -> anyhow::Result<ExperimentConfig> {
    use anyhow::Context;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
    match (table.get("command"), table.get("config")) {
        (Some(_), Some(toml::Value::Table(cfg))) => cfg
            .clone()
            .try_into()
            .map_err(|e| anyhow::anyhow!("invalid config in manifest {}: {e}", path.display())),
        _ => ExperimentConfig::from_toml_str(&text).map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display())),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
