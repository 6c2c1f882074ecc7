//! `repnerv`: synthesize videos, train, fuse, evaluate, compress and ablate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{usage, Failure, Outcome};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "repnerv", version, about = "Online reparameterized neural video representation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for synthesis, initialization and frame order.
    #[arg(long)]
    seed: Option<u64>,
    /// Trailing `key=value` overrides, applied last.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic video as PPM frames.
    Synth {
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Overfit a model to a frame directory.
    Train {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// online, explicit or plain
        #[arg(long)]
        mode: Option<String>,
        /// steps:N or seconds:S
        #[arg(long)]
        budget: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Collapse every block of a train-form checkpoint into one convolution.
    Fuse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-frame PSNR, MS-SSIM and decode speed as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Prune, quantize and entropy-code a checkpoint.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long)]
        bits: Option<u8>,
        #[arg(long)]
        finetune_steps: Option<u64>,
        /// Comma-separated bit depths added to the rate-distortion CSV.
        #[arg(long)]
        sweep_bits: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per branch set and tabulate quality.
    Ablate {
        #[arg(long)]
        frames: PathBuf,
        /// table3 or all
        #[arg(long)]
        rows: Option<String>,
        #[arg(long)]
        budget: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Defaults, then the config file, then flags, then trailing overrides.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.apply_file(p).map_err(usage)?;
    }
    let seed = common.seed.map(|s| s.to_string());
    for (k, v) in flags.iter().chain([&("seed", seed)]) {
        if let Some(v) = v {
            cfg.set(k, v).map_err(|e| usage(format!("--{}: {e}", k.replace('_', "-"))))?;
        }
    }
    cfg.apply_overrides(&common.overrides).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth { kind, frames, height, width, out, common } => {
            let cfg = resolve(
                &common,
                &[("kind", kind), ("frames", text(&frames)), ("height", text(&height)), ("width", text(&width))],
            )?;
            commands::synth(&cfg, &out)
        }
        Command::Train { frames, out, mode, budget, common } => {
            let cfg = resolve(&common, &[("mode", mode), ("budget", budget)])?;
            commands::train_cmd(&cfg, &frames, &out)
        }
        Command::Fuse { input, out, common } => commands::fuse(&resolve(&common, &[])?, &input, &out),
        Command::Eval { checkpoint, frames, out, common } => {
            commands::eval(&resolve(&common, &[])?, &checkpoint, &frames, &out)
        }
        Command::Compress { checkpoint, frames, sparsity, bits, finetune_steps, sweep_bits, out, common } => {
            let cfg = resolve(
                &common,
                &[
                    ("sparsity", text(&sparsity)),
                    ("bits", text(&bits)),
                    ("finetune_steps", text(&finetune_steps)),
                    ("sweep_bits", sweep_bits),
                ],
            )?;
            commands::compress(&cfg, &checkpoint, &frames, &out)
        }
        Command::Ablate { frames, rows, budget, out, common } => {
            let cfg = resolve(&common, &[("rows", rows), ("budget", budget)])?;
            commands::ablate(&cfg, &frames, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
