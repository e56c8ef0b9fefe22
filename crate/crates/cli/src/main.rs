//! `lcasr`: data preparation, training, long-form transcription, scoring and
//! context-length sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod failure;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Parser)]
#[command(name = "lcasr", version, about = "Long-context CTC speech recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a manifest and write a normalized copy plus a vocabulary file.
    Prepare {
        manifest: PathBuf,
        /// Output directory (required unless --validate).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report problems without writing anything.
        #[arg(long)]
        validate: bool,
    },
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Transcribe one WAV file with moving-window decoding.
    Transcribe {
        checkpoint: PathBuf,
        wav: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
        /// Write the merged posterior lattice as JSON.
        #[arg(long)]
        lattice_out: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest.
    Evaluate {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per context length and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Context lengths in seconds.
        #[arg(long, value_delimiter = ',', required = true)]
        contexts: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        /// Override `train.total_steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Override `data.runs_dir`.
        #[arg(long)]
        runs_dir: Option<PathBuf>,
    },
    /// Aggregate evaluation reports found under a directory.
    Report {
        results_dir: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        baseline_s: f64,
    },
    /// Write a synthetic corpus (WAV files and a manifest).
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to `{runs_dir}/{timestamp}-{context}s-{seed}`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    peak_lr: Option<f64>,
    /// Train at a fixed context length instead of the warmup schedule.
    #[arg(long)]
    context_s: Option<f64>,
}

#[derive(Args, Clone, Copy)]
struct WindowArgs {
    /// Window length in seconds (default: the checkpoint's training context).
    #[arg(long)]
    window_s: Option<f64>,
    /// Stride in seconds (default: 12.5 % of the window).
    #[arg(long)]
    stride_s: Option<f64>,
    #[arg(long, value_enum, default_value = "probability")]
    merge: Merge,
    #[arg(long, value_enum, default_value = "global")]
    norm: Norm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Merge {
    Probability,
    LogDomain,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    Global,
    PerBand,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Tone,
    Cue,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Prepare {
            manifest,
            out,
            validate,
        } => commands::prepare(&manifest, out.as_deref(), validate),
        Command::Train(a) => commands::train(&commands::TrainOverrides {
            config: a.config,
            out: a.out,
            steps: a.steps,
            seed: a.seed,
            peak_lr: a.peak_lr,
            context_s: a.context_s,
        }),
        Command::Transcribe {
            checkpoint,
            wav,
            window,
            lattice_out,
        } => commands::transcribe(&checkpoint, &wav, &window.into(), lattice_out.as_deref()),
        Command::Evaluate {
            checkpoint,
            manifest,
            window,
            out,
        } => commands::evaluate(&checkpoint, &manifest, &window.into(), out.as_deref()),
        Command::Sweep {
            config,
            contexts,
            seeds,
            steps,
            runs_dir,
        } => sweep::sweep(&config, &contexts, &seeds, steps, runs_dir),
        Command::Report {
            results_dir,
            baseline_s,
        } => sweep::report(&results_dir, baseline_s),
        Command::Synth { kind, out, n, seed } => commands::synth(matches!(kind, SynthKind::Cue), &out, n, seed),
    }
}

impl From<WindowArgs> for commands::WindowSettings {
    fn from(w: WindowArgs) -> Self {
        Self {
            window_s: w.window_s,
            stride_s: w.stride_s,
            merge: match w.merge {
                Merge::Probability => lcasr::window::MergeMode::Probability,
                Merge::LogDomain => lcasr::window::MergeMode::LogDomain,
            },
            norm: match w.norm {
                Norm::Global => lcasr::dsp::NormScope::Global,
                Norm::PerBand => lcasr::dsp::NormScope::PerBand,
            },
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
