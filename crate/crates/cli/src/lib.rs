//! Command-line front end: generate, train, evaluate, explain, gradcheck.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use psygat::model::PersonaMode;
use psygat::session::Split;
use psygat::train::ThresholdObjective;

use crate::commands::TrainOverrides;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "psygat", version = env!("PSYGAT_GIT_DESCRIBE"), about = "Persona-aware depression detection on counselling sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with PEU and cause annotations.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a seed ensemble and report validation and test metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train a single member with this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        persona_mode: Option<OnOff>,
        /// One of f1, f0.5, precision@recall.
        #[arg(long, value_parser = parse_objective)]
        threshold_objective: Option<ThresholdObjective>,
    },
    /// Score a split with a trained checkpoint or ensemble.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test", value_parser = commands::parse_split)]
        split: Split,
        /// Overrides the threshold stored with the checkpoint.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the causal scorer on frozen representations and rank causes.
    Explain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value = "test", value_parser = commands::parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn parse_objective(s: &str) -> Result<ThresholdObjective, String> {
    ThresholdObjective::parse(s).map_err(|e| e.to_string())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { config, seed, out } => commands::generate(config.as_deref(), seed, &out),
        Command::Train { config, corpus, out, seed, persona_mode, threshold_objective } => {
            let ov = TrainOverrides {
                seed,
                persona_mode: persona_mode.map(|m| match m {
                    OnOff::On => PersonaMode::On,
                    OnOff::Off => PersonaMode::Off,
                }),
                threshold_objective,
            };
            let r = commands::train(config.as_deref(), &corpus, &out, &ov)?;
            println!(
                "val macro-F1 {:.4} PR-AUC {}; threshold {:.4}",
                r.val.metrics.macro_f1,
                fmt_opt(r.val.metrics.pr_auc),
                r.threshold
            );
            if let Some(t) = &r.test {
                println!("test macro-F1 {:.4} PR-AUC {}", t.metrics.macro_f1, fmt_opt(t.metrics.pr_auc));
            }
            Ok(())
        }
        Command::Evaluate { config, checkpoint, corpus, split, threshold, out } => {
            let r = commands::evaluate(config.as_deref(), &checkpoint, &corpus, split, threshold, &out)?;
            println!(
                "{} macro-F1 {:.4} PR-AUC {} over {} sessions",
                r.split,
                r.metrics.macro_f1,
                fmt_opt(r.metrics.pr_auc),
                r.sessions
            );
            Ok(())
        }
        Command::Explain { config, checkpoint, corpus, window, split, out } => {
            let r = commands::explain(config.as_deref(), &checkpoint, &corpus, window, split, &out)?;
            let m = &r.causal.ranking;
            println!(
                "{} instances: MRR {:.4} (random {:.4}), Hit@1 {:.4}, Hit@3 {:.4}",
                r.split, m.mrr, r.random_mrr, m.hit1, m.hit3
            );
            Ok(())
        }
        Command::Gradcheck { inject_fault } => {
            let summary = commands::gradcheck(inject_fault.as_deref())?;
            print!("{}", summary.table());
            if summary.all_passed() {
                Ok(())
            } else {
                Err(CliError::from(anyhow::anyhow!("gradient check failed")))
            }
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

/// Parses arguments, runs the command and maps failures to exit codes:
/// 1 for runtime and data errors, 2 for usage and configuration errors.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
