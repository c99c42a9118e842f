//! `netshrink` command-line driver.
//!
//! Exit codes: 0 on success, 1 on any error, 3 when `--max-epochs` stopped a
//! phase before its configured epoch count (the checkpoint is resumable).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netshrink::config::ExperimentConfig;
use netshrink::distill::TransferMode;
use netshrink::pipeline::{self, ArchRecord, ModelReport, PhaseOptions};
use netshrink::Error;

#[derive(Debug, Parser)]
#[command(
    name = "netshrink",
    version,
    about = "Search pruned CNN widths and depths, then train the result"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many epochs in this invocation; rerun to resume.
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the unpruned network.
    PretrainTeacher {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Search widths and depths under the FLOP budget.
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// Teacher checkpoint used to initialize the supernet weights.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Print the most likely architecture of a search checkpoint.
    Derive {
        #[arg(long)]
        search_ckpt: PathBuf,
    },
    /// Train the derived network.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        /// Architecture record written by `search`.
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value = "kd")]
        mode: TransferMode,
    },
    /// Test accuracy and FLOPs of a teacher or student checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Write report.csv and summary.csv for a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

/// Appends one formatted line to the output buffer.
macro_rules! emit {
    ($out:expr, $($arg:tt)*) => {{
        $out.push_str(&format!($($arg)*));
        $out.push('\n');
    }};
}

fn load(run: &RunArgs) -> netshrink::Result<(ExperimentConfig, PhaseOptions)> {
    let mut cfg = ExperimentConfig::load(&run.config)?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    Ok((
        cfg,
        PhaseOptions {
            max_epochs: run.max_epochs,
        },
    ))
}

fn print_arch(out: &mut String, r: &ArchRecord) {
    let widths: Vec<String> = r
        .arch
        .widths
        .iter()
        .map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .collect();
    let depths: Vec<String> = r.arch.depths.iter().map(usize::to_string).collect();
    emit!(out, "widths {}", widths.join(" | "));
    emit!(out, "depths {}", depths.join(","));
    emit!(out, "flops {}", r.flops);
    emit!(out, "max_flops {}", r.max_flops);
    emit!(out, "pruning_ratio {:.6}", r.pruning_ratio);
}

fn print_model(out: &mut String, r: &ModelReport, dir: &Path) {
    emit!(out, "test_accuracy {:.6}", r.test_accuracy);
    emit!(out, "flops {}", r.record.flops);
    emit!(out, "pruning_ratio {:.6}", r.record.pruning_ratio);
    emit!(out, "epochs {}", r.epochs);
    emit!(out, "output {}", dir.display());
}

fn run(cli: Cli, out: &mut String) -> netshrink::Result<()> {
    match cli.command {
        Command::PretrainTeacher { run } => {
            let (cfg, opts) = load(&run)?;
            let r = pipeline::pretrain_teacher(&cfg, &opts)?;
            print_model(out, &r, &cfg.resolved_output_dir().join(pipeline::TEACHER_CKPT));
        }
        Command::Search { run, teacher } => {
            let (cfg, opts) = load(&run)?;
            let r = pipeline::run_search(&cfg, teacher.as_deref(), &opts)?;
            print_arch(out, &r);
            emit!(
                out,
                "output {}",
                cfg.resolved_output_dir().join(pipeline::ARCH_RECORD).display()
            );
        }
        Command::Derive { search_ckpt } => print_arch(out, &pipeline::derive(&search_ckpt)?),
        Command::Transfer {
            run,
            arch,
            teacher,
            mode,
        } => {
            let (cfg, opts) = load(&run)?;
            let r = pipeline::transfer(&cfg, &arch, &teacher, mode, &opts)?;
            print_model(
                out,
                &r,
                &cfg.resolved_output_dir().join(pipeline::student_ckpt_name(mode)),
            );
        }
        Command::Eval { ckpt } => {
            let r = pipeline::eval_checkpoint(&ckpt)?;
            emit!(out, "phase {}", r.phase);
            emit!(out, "test_accuracy {:.6}", r.test_accuracy);
            emit!(out, "flops {}", r.record.flops);
            emit!(out, "pruning_ratio {:.6}", r.record.pruning_ratio);
        }
        Command::Report { run_dir } => out.push_str(&pipeline::report(&run_dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let mut out = String::new();
    let result = run(Cli::parse(), &mut out);
    // a closed stdout (e.g. piped into `head`) is not an error of the run
    let _ = std::io::stdout().write_all(out.as_bytes());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Interrupted { epoch }) => {
            eprintln!("paused after epoch {epoch}; rerun the same command to resume");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
