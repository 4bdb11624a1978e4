use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use djescc_core::imagedata::default_cache_dir;
use djescc_core::pipeline::{self, Workspace};
use djescc_core::training::ExperimentConfig;

/// Learned image encryption with deep JSCC over an AWGN channel.
#[derive(Parser, Debug)]
#[command(name = "djescc", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.lambda_e=0.1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    /// Dataset cache root (falls back to $DJESCC_CACHE, then ./data).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download, verify and unpack every dataset the config uses.
    PrepareData,
    /// Pretrain the classifier whose trunk provides the feature loss.
    PretrainFeatures,
    /// Train the encryption, JSCC and decryption networks jointly.
    Train {
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Per-SNR PSNR/SSIM of a finished run.
    Evaluate,
    /// Encrypt a plain image (owner side).
    Encrypt(FileArgs),
    /// Encode, send over AWGN and decode a cipher image (provider side).
    Transmit {
        #[command(flatten)]
        files: FileArgs,
        #[arg(long)]
        snr_db: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decrypt a received image (recipient side).
    Decrypt(FileArgs),
    /// Ciphertext-only attacks (bit-plane and GAN) against a finished run.
    Attack,
    /// Collect evaluated runs into curves, an SVG overlay and a summary.
    Report {
        /// Run ids under the runs directory.
        #[arg(required = true)]
        runs: Vec<String>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct FileArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Checkpoint to use; defaults to the matching part of the configured run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn part(ws: &Workspace, cfg: &ExperimentConfig, f: &FileArgs, name: &str) -> PathBuf {
    f.checkpoint
        .clone()
        .unwrap_or_else(|| ws.run_dir(cfg).join("checkpoints").join(format!("{name}.safetensors")))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = pipeline::load_config(cli.config.as_deref(), &cli.overrides).context("loading config")?;
    let ws = Workspace {
        cache: cli.cache_dir.clone().unwrap_or_else(default_cache_dir),
        runs: cli.runs_dir.clone(),
    };
    match &cli.command {
        Command::PrepareData => {
            for line in pipeline::prepare_data(&cfg, &ws)? {
                println!("{line}");
            }
        }
        Command::PretrainFeatures => {
            let (path, report) = pipeline::pretrain_features(&cfg, &ws)?;
            println!(
                "saved {} (test accuracy {:.4})",
                path.display(),
                report.test_accuracy
            );
        }
        Command::Train { resume, stop_after } => {
            let (dir, finished) = pipeline::train_run(&cfg, &ws, *resume, *stop_after)?;
            if finished {
                println!("finished; checkpoints in {}", dir.join("checkpoints").display());
            } else {
                println!("stopped early; continue with `train --resume` ({})", dir.display());
            }
        }
        Command::Evaluate => {
            let table = pipeline::evaluate_run(&cfg, &ws)?;
            print!("{}", table.summary_csv());
        }
        Command::Encrypt(f) => {
            pipeline::encrypt_file(&part(&ws, &cfg, f, "encryption"), &f.input, &f.output)?;
        }
        Command::Transmit { files, snr_db, seed } => {
            pipeline::transmit_file(&part(&ws, &cfg, files, "djscc"), &files.input, &files.output, *snr_db, *seed)?;
        }
        Command::Decrypt(f) => {
            pipeline::decrypt_file(&part(&ws, &cfg, f, "decryption"), &f.input, &f.output)?;
        }
        Command::Attack => {
            for r in pipeline::attack_run(&cfg, &ws)? {
                println!("{}", r.summary_line());
            }
        }
        Command::Report { runs, out } => {
            if runs.is_empty() {
                bail!("no runs given");
            }
            let dirs: Vec<PathBuf> = runs.iter().map(|r| ws.runs.join(r)).collect();
            let report = pipeline::emit_report(&dirs, out)?;
            println!("wrote {}", report.markdown.display());
            for g in &report.gaps {
                eprintln!("gap: {g}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
