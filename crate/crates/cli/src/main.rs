//! `dadt` command-line driver.
//!
//! Exit codes: 0 success, 1 invalid input, 2 I/O failure, 3 failed check.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dadt::distill::Mode;

use crate::commands::{ExportContextArgs, TrainArgs};
use crate::config::CliResult;

#[derive(Parser)]
#[command(
    name = "dadt",
    version,
    about = "Density-aligned distill-tuning of LiDAR BEV detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Vanilla,
    Dadt,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vanilla => Mode::Vanilla,
            ModeArg::Dadt => Mode::Dadt,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (frames, labels, manifest).
    Simulate {
        /// Scene template JSON; defaults are used for missing keys.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emulate a lower-beam sensor by clustering and dropping beams.
    Resample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 64)]
        source_beams: usize,
        #[arg(long)]
        target_beams: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-beam counts, kept beams and clustering inertia as JSON.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Train a student (dadt) or a plain finetuned baseline (vanilla).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Teacher checkpoint, or "none".
        #[arg(long)]
        teacher: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Run config supplying the grid and evaluation thresholds.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the context map of one class as an 8-bit PGM.
    ExportContext {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write pooled object features as CSV.
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Corrupt the analytic gradient of one component.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate {
            scene,
            frames,
            seed,
            out,
        } => commands::simulate(scene.as_deref(), frames, seed, &out),
        Command::Resample {
            input,
            source_beams,
            target_beams,
            seed,
            out,
            stats,
        } => commands::resample(
            &input,
            source_beams,
            target_beams,
            seed,
            &out,
            stats.as_deref(),
        ),
        Command::Train {
            config,
            data,
            teacher,
            mode,
            out,
        } => commands::train_cmd(TrainArgs {
            config: config.as_deref(),
            data: data.as_deref(),
            teacher: teacher.as_deref(),
            mode: mode.map(Mode::from),
            out: out.as_deref(),
        }),
        Command::Eval {
            ckpt,
            data,
            report,
            config,
        } => commands::eval_cmd(&ckpt, &data, &report, config.as_deref()),
        Command::ExportContext {
            ckpt,
            frame,
            labels,
            class,
            out,
            config,
        } => commands::export_context(ExportContextArgs {
            ckpt: &ckpt,
            frame: &frame,
            labels: &labels,
            class: &class,
            out: &out,
            config: config.as_deref(),
        }),
        Command::ExportFeatures {
            ckpt,
            data,
            out,
            config,
        } => commands::export_features(&ckpt, &data, &out, config.as_deref()),
        Command::Gradcheck {
            seed,
            report,
            inject_fault,
        } => commands::gradcheck(seed, inject_fault.as_deref(), report.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are input validation errors, not clap's default 2.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
