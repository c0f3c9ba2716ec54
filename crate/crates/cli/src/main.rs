use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

mod commands;
mod config;
mod error;

use error::CliError;

/// Pyramid non-local smoothing networks: training, inference and analysis.
#[derive(Debug, Parser)]
#[command(name = "pnen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `--set key=value` overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network to imitate a filter; writes loss.csv and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Artifact directory; overrides the out_dir key.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint over one image or a directory of images.
    Infer {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Image file or directory of .pgm/.ppm images.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// PSNR and SSIM per image as CSV.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Source images; targets are these images passed through the configured filter.
        #[arg(long, value_name = "DIR")]
        input: Option<PathBuf>,
        /// Reference images used as targets instead of filtering --input.
        #[arg(long, value_name = "DIR")]
        reference: Option<PathBuf>,
        /// Predictions come from running this checkpoint on --input.
        #[arg(long, value_name = "FILE", conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        /// Directory of precomputed predictions.
        #[arg(long, value_name = "DIR")]
        pred: Option<PathBuf>,
        /// CSV destination; stdout when absent.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Analytic cost report for the none, nlb, apnb and pnb variants.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input side in pixels.
        #[arg(long, default_value_t = 96)]
        size: usize,
        /// Bytes per stored element.
        #[arg(long, default_value_t = 4)]
        dtype_bytes: usize,
        /// Also write one CSV per variant into this directory.
        #[arg(long, value_name = "DIR")]
        csv_dir: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every layer class.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Skip the whole-network check.
        #[arg(long)]
        skip_end_to_end: bool,
    },
    /// Per-scale attention maps of one pixel as PGM images plus raw text.
    DumpAttn {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to load; without it a freshly initialised model from the config is used.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Query pixel as `y,x`.
        #[arg(long, value_name = "Y,X")]
        pixel: String,
        /// Attention block (group) to inspect.
        #[arg(long, default_value_t = 0)]
        group: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write a synthetic texture corpus.
    SynthData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        regions: usize,
        #[arg(long, default_value_t = 0.015)]
        amplitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn cli_command() -> clap::Command {
    let keys = config::help_text();
    let mut cmd = Cli::command();
    for name in ["train", "eval", "bench", "dump-attn"] {
        let keys = keys.clone();
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys));
    }
    cmd
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => commands::train(&config, out),
        Command::Infer { checkpoint, input, out } => commands::infer(&checkpoint, &input, &out),
        Command::Eval { config, input, reference, checkpoint, pred, out } => commands::eval(commands::EvalArgs {
            config: &config,
            input: input.as_deref(),
            reference: reference.as_deref(),
            checkpoint: checkpoint.as_deref(),
            pred: pred.as_deref(),
            out: out.as_deref(),
        }),
        Command::Bench { config, size, dtype_bytes, csv_dir } => commands::bench(&config, size, dtype_bytes, csv_dir.as_deref()),
        Command::Gradcheck { seed, skip_end_to_end } => commands::gradcheck(seed, skip_end_to_end),
        Command::DumpAttn { config, checkpoint, image, pixel, group, out } => {
            commands::dump_attn(&config, checkpoint.as_deref(), &image, &pixel, group, &out)
        }
        Command::SynthData { out, count, size, channels, regions, amplitude, seed } => {
            commands::synth_data(&out, pnen::train::TextureSpec { count, size, channels, regions, amplitude, seed })
        }
    }
}

fn main() -> ExitCode {
    let parsed = cli_command().try_get_matches().and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pnen: {}", e.one_line());
            ExitCode::from(e.exit_code())
        }
    }
}
