//! `matres`: corpus generation, pretraining, adaptation runs, evaluation
//! and gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 gate or assertion failure.

mod commands;
mod config;
mod corpus;
mod draw;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use matres_core::synth::CorpusConfig;

use crate::config::{resolve, AdaptSettings, PretrainSettings, SEED_ENV};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "matres", version, about = "Test-time mutual adaptation of a frozen matcher and restorer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings sources shared by the configurable commands.
#[derive(Args)]
struct Settings {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Settings {
    fn resolve<T: serde::de::DeserializeOwned>(&self) -> CliResult<T> {
        let seed = std::env::var(SEED_ENV).ok();
        resolve(self.config.as_deref(), &self.sets, seed.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded corpus of degraded/reference pairs.
    Synth {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the matcher and restorer that adaptation keeps frozen.
    Pretrain {
        #[command(flatten)]
        settings: Settings,
        /// Corpus directory; fixes the frame size and channel count.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Adapt every corpus pair and write one run directory per pair.
    Adapt {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        corpus: PathBuf,
        /// Directory written by `pretrain`.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also run the adapter-free pipeline and save its outputs.
        #[arg(long)]
        with_baseline: bool,
        /// Only the first N pairs of the corpus.
        #[arg(long, value_name = "N")]
        pairs: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Aggregate run directories into a report with loss curves and overlays.
    Eval {
        #[arg(long)]
        runs: PathBuf,
        /// Corpus the runs came from; defines the expected pairs.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Check every gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { settings, out, force } => {
            let config: CorpusConfig = settings.resolve()?;
            let manifest = commands::synth::run(&config, &out, force)?;
            println!("{} pairs written to {}", manifest.pairs.len(), out.display());
        }
        Command::Pretrain { settings, corpus, out, force } => {
            let s: PretrainSettings = settings.resolve()?;
            let g = commands::pretrain::run(&s, &corpus, &out, force)?;
            println!(
                "matcher accuracy {:.3} (required {:.3}), restorer gain {:.2} dB (required {:.2}); weights in {}",
                g.matcher_accuracy,
                g.matcher_required,
                g.restorer_gain_db,
                g.restorer_required_db,
                out.display()
            );
        }
        Command::Adapt { settings, corpus, weights, out, with_baseline, pairs, jobs, force } => {
            let s: AdaptSettings = settings.resolve()?;
            let req = commands::adapt::Request {
                settings: &s,
                corpus: &corpus,
                weights: &weights,
                out: &out,
                pairs,
                jobs,
                with_baseline,
                force,
            };
            let record = commands::adapt::run(&req)?;
            let (n, failed) = (record.pairs.len(), record.failures.len());
            println!("{} of {n} pairs adapted into {}", n - failed, out.display());
            if failed > 0 {
                let ids: Vec<&str> = record.failures.iter().map(|f| f.pair_id.as_str()).collect();
                return Err(CliError::Gate(format!("{failed} of {n} pairs failed: {}", ids.join(", "))));
            }
        }
        Command::Eval { runs, corpus, out, force } => {
            let report = commands::eval::run(&runs, corpus.as_deref(), &out, force)?;
            let s = &report.summary;
            println!(
                "{} pairs, {} missing: PSNR {:.2} -> {:.2} dB, SSIM {:.3} -> {:.3}, mAUC {:.1} -> {:.1}, median dPSNR {:+.2} dB, median dMAE {:+.2} px",
                s.pairs,
                report.missing.len(),
                s.mean_psnr_baseline,
                s.mean_psnr_adapted,
                s.mean_ssim_baseline,
                s.mean_ssim_adapted,
                s.mauc_baseline,
                s.mauc_adapted,
                s.median_delta_psnr,
                s.median_delta_mae
            );
        }
        Command::Gradcheck { seed } => {
            let outcomes = commands::gradcheck::run(seed)?;
            print!("{}", commands::gradcheck::table(&outcomes));
            let failed: Vec<String> = outcomes
                .iter()
                .filter(|o| !o.passed)
                .map(|o| format!("{} (seed {}, rel error {:.2e})", o.op, o.seed, o.rel_error))
                .collect();
            if !failed.is_empty() {
                return Err(CliError::Gate(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors; clap's own code for
            // usage errors is 2, which is reserved here for gate failures.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
