mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attrnet", version, about = "Shared-trunk face attribute networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `--set key=value` overrides.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Search trunk configurations against size and cost budgets
    ArchResolve {
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the best configuration as key=value text
        #[arg(long)]
        out_config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Train the identity trunk
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log (TSV); defaults to <out>.log.tsv
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train one task head on top of a frozen trunk
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        trunk: PathBuf,
        #[arg(long)]
        branch: String,
        #[arg(long)]
        task: String,
        #[arg(long)]
        classes: usize,
        /// Copy intermediate layers from the trunk instead of re-initializing
        #[arg(long)]
        warm: bool,
        /// softmax or sigmoid
        #[arg(long, default_value = "softmax")]
        loss: String,
        /// Manifest label column; defaults to the task name
        #[arg(long)]
        field: Option<String>,
        #[arg(long)]
        data: PathBuf,
        /// Bundle directory (created or extended)
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune and score a head at every (layer, task) cell
    BranchGrid {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        trunk: PathBuf,
        /// Lines of `task field loss`
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "conv17,conv19,conv21,conv22,conv-bn320,fc")]
        layers: Vec<String>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run every head of a bundle on a dataset
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write penultimate-layer embeddings for every sample
    Embed {
        #[arg(long)]
        trunk: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "bn320")]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-split-out verification on embedding pairs
    EvalVerify {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Pick a global multi-label threshold for a target false-positive rate
    OperatingPoint {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0.0103)]
        target_fpr: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Linear probes on pooled trunk activations
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        trunk: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        /// Manifest label columns to probe
        #[arg(long, value_delimiter = ',', default_value = "nuisance,binary")]
        factors: Vec<String>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Generate the synthetic attribute suite
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter and cost table
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "macs")]
        convention: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " | "));
            ExitCode::FAILURE
        }
    }
}
