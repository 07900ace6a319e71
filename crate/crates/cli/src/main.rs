use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use etsc_core::pipeline::{self, CHECKPOINT_FILE};
use etsc_core::verify::gradient_suite;
use etsc_core::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "etsc", version, about = "Early time-series classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by a config and write CSVs.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write checkpoint, per-epoch report and test metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a trained checkpoint on test prefixes of the given lengths.
    EarlySweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated prefix lengths, e.g. `2,4,8`.
        #[arg(long = "t")]
        t: String,
    },
    /// Finite-difference check of every differentiable op and the model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append an op with a deliberately broken backward pass.
        #[arg(long, hide = true)]
        corrupt_fixture: bool,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Split(_) => 3,
        Error::Verification(_) => 4,
        Error::Diverged { .. } => 5,
        _ => 1,
    }
}

fn output_dir(cfg: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf, Error> {
    out.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = pipeline::load_run_config(&config)?;
            let dir = output_dir(&cfg, out)?;
            print!("{}", pipeline::synth(&cfg, &dir)?.to_text());
        }
        Command::Train { config, out, quiet } => {
            let cfg = pipeline::load_run_config(&config)?;
            let dir = output_dir(&cfg, out)?;
            let outcome = pipeline::train(&cfg, &dir, |r| {
                if !quiet {
                    eprintln!(
                        "epoch {:>4}  r {:.4}  loss {:.5}  val_acc {}",
                        r.epoch,
                        r.keep_ratio,
                        r.loss_total,
                        r.val_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
                    );
                }
            })?;
            let m = &outcome.test_metrics;
            println!(
                "test accuracy {:.4}  macro precision {:.4}  macro recall {:.4}  macro f1 {:.4}",
                m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
            );
            println!("checkpoint {}", Path::new(&dir).join(CHECKPOINT_FILE).display());
        }
        Command::EarlySweep { checkpoint, t } => {
            let ts = pipeline::parse_prefix_list(&t)?;
            print!("{}", pipeline::early_sweep_from_checkpoint(&checkpoint, &ts)?.to_text());
        }
        Command::Gradcheck { seed, corrupt_fixture } => {
            let report = gradient_suite(seed, corrupt_fixture)?;
            print!("{}", report.to_text());
            if !report.passed() {
                let failed: Vec<_> = report.rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
                return Err(Error::Verification(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
