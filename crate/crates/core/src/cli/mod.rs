//! Batch command-line surface. Every command writes a [`RunManifest`]
//! beside its outputs; exit codes are 0 success, 1 usage, 2 data, 3
//! numerical failure.

mod commands;
pub mod manifest;
mod settings;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_ablate, cmd_eval, cmd_export_emb, cmd_gen_synth, cmd_train, parse_etas, parse_seeds};
pub use manifest::{sha256_file, sha256_hex, sidecar_path, FileRecord, PatternSpec, RunManifest};
pub use settings::{load_config, parse_config_text, Settings};

use crate::error::Error;

#[derive(Debug, Parser)]
#[command(name = "promise", version, about = "Missing-modality training with prompt attention and contrastive objectives")]
pub struct Cli {
    /// Flat key=value file (or a manifest.json) supplying defaults for flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-modality Gaussian-cluster dataset.
    GenSynth(GenSynthArgs),
    /// Train a model; writes checkpoint, per-epoch log and test report.
    Train(TrainCmdArgs),
    /// Evaluate a checkpoint on a split of a dataset.
    Eval(EvalArgs),
    /// Run the (protocol, eta, component config, seed) grid.
    Ablate(AblateArgs),
    /// Export effective per-sample features with generated flags.
    ExportEmb(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub d1: Option<usize>,
    #[arg(long)]
    pub d2: Option<usize>,
    #[arg(long)]
    pub sep: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Training knobs shared by `train` and `ablate`.
#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight of the contrastive term.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Model-selection metric: accuracy, auroc or f1_macro.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub attn_layers: Option<usize>,
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub no_prompt: bool,
    #[arg(long)]
    pub no_fncl: bool,
    #[arg(long)]
    pub no_cccl: bool,
}

#[derive(Debug, Args)]
pub struct TrainCmdArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to the training protocol.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Defaults to the training missing rate.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Pattern and augmentation seed; defaults to the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub metric: Option<String>,
    /// train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Report stem; `.tsv` and `.jsonl` are appended.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `a..b` (step 0.1), `a..b:step`, or a comma list.
    #[arg(long)]
    pub etas: Option<String>,
    /// Comma list of protocols.
    #[arg(long)]
    pub protocols: Option<String>,
    /// Comma list of full, prompt_fncl, prompt_cccl, prompt_only, baseline.
    #[arg(long)]
    pub configs: Option<String>,
    /// `a..b` (inclusive) or a comma list.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Apply a fresh missing pattern before exporting.
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> crate::Result<()> {
    let file = match &cli.config {
        Some(p) => load_config(p)?,
        None => Default::default(),
    };
    let settings = Settings::new(file);
    match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a, settings, out),
        Command::Train(a) => cmd_train(a, settings, out),
        Command::Eval(a) => cmd_eval(a, settings, out),
        Command::Ablate(a) => cmd_ablate(a, settings, out),
        Command::ExportEmb(a) => cmd_export_emb(a, settings, out),
    }
}

pub(crate) fn write_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}
