//! `msic` — multi-scale image codec CLI.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 model
//! mismatch between a container and the loaded model.

mod commands;
mod pngio;

use clap::{Parser, Subcommand};
use commands::{BenchArgs, TrainArgs};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "msic", version, about = "Multi-scale image codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the autoencoder (stage ae) or the lossless coder (stage coder).
    Train {
        /// Training stage: "ae" or "coder".
        #[arg(long)]
        stage: String,
        /// Directory of PNG training images.
        #[arg(long)]
        corpus: PathBuf,
        /// key=value config file (stage ae only).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Warm-start checkpoint; required for stage coder (the frozen
        /// autoencoder).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Override the update count (default 2000).
        #[arg(long)]
        updates: Option<usize>,
        /// Override the batch size.
        #[arg(long)]
        batch: Option<usize>,
        /// Override the crop size (stage ae).
        #[arg(long)]
        crop: Option<usize>,
    },
    /// Compress a PNG into a .msic container.
    Compress {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop the leading conditional blocks (faster, slightly larger).
        #[arg(long, default_value_t = 0)]
        drop_blocks: usize,
    },
    /// Decompress a .msic container back to PNG.
    Decompress {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress+decompress a corpus and write per-image RD rows as CSV.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        drop_blocks: usize,
        /// Report timings as 0.0 for byte-reproducible output.
        #[arg(long, default_value_t = false)]
        fixed_time: bool,
    },
    /// RD comparison against external codecs; writes rd.csv and rd.svg.
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Shell template with {in} {out} {q} and optional {png}.
        #[arg(long)]
        jpeg_cmd: Option<String>,
        #[arg(long)]
        webp_cmd: Option<String>,
        #[arg(long)]
        bpg_cmd: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        drop_blocks: usize,
        #[arg(long, default_value_t = false)]
        fixed_time: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train {
            stage,
            corpus,
            config,
            out,
            seed,
            init,
            updates,
            batch,
            crop,
        } => commands::cmd_train(&TrainArgs {
            stage,
            corpus,
            config,
            out,
            seed,
            init,
            updates,
            batch,
            crop,
        }),
        Cmd::Compress {
            input,
            model,
            out,
            drop_blocks,
        } => commands::cmd_compress(&input, &model, &out, drop_blocks),
        Cmd::Decompress { input, model, out } => commands::cmd_decompress(&input, &model, &out),
        Cmd::Eval {
            corpus,
            model,
            out,
            drop_blocks,
            fixed_time,
        } => commands::cmd_eval(&corpus, &model, &out, drop_blocks, fixed_time),
        Cmd::Bench {
            corpus,
            model,
            jpeg_cmd,
            webp_cmd,
            bpg_cmd,
            out,
            drop_blocks,
            fixed_time,
        } => commands::cmd_bench(&BenchArgs {
            corpus,
            model,
            jpeg_cmd,
            webp_cmd,
            bpg_cmd,
            out,
            drop_blocks,
            fixed_time,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success; everything
            // else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<msic_core::Error>() {
                Some(msic_core::Error::ModelMismatch { .. }) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
