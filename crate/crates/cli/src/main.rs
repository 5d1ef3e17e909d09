//! `survite`: generate cohorts, train, evaluate, sweep beta and reproduce the
//! covariate-shift experiments.
//!
//! Exit status is 0 when every replication succeeded, 2 when some replication
//! failed or an artifact was missing (the rest still ran), and 1 on
//! configuration or I/O errors.

mod commands;
mod config;
mod store;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::{Method, Overrides};
use crate::store::Layout;

#[derive(Parser)]
#[command(name = "survite", version, about = "Treatment-specific hazard estimation under covariate shift")]
struct Cli {
    /// Root under which data-<hash>/ and run-<hash>/ directories are created.
    #[arg(long, global = true, env = "SURVITE_OUTPUT_ROOT", default_value = "survite-runs")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train and test cohorts with their ground-truth tables.
    Generate(RunArgs),
    /// Fit one checkpoint per (method, replication).
    Train(RunArgs),
    /// Score checkpoints against ground truth and aggregate over replications.
    Evaluate(RunArgs),
    /// Train and evaluate every beta candidate.
    SweepBeta(RunArgs),
    /// Generate, train and evaluate S1 to S4 and both toy variants.
    Reproduce(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML configuration file; built-in defaults when absent.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    /// Comma-separated: survite, survite_no_ipm, survite_cfr1, survite_cfr2, survihe, lr_sep, oracle.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Training cohort size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    test_n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    beta_selection: Option<bool>,
    /// Overrides the output root for this configuration.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Overrides> {
        let methods = match &self.methods {
            Some(m) => Some(m.iter().map(|s| Method::parse(s)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        Ok(Overrides {
            seed: self.seed,
            replications: self.replications,
            methods,
            n: self.n,
            test_n: self.test_n,
            epochs: self.epochs,
            beta_selection: self.beta_selection,
            output_dir: self.output_dir.clone(),
        })
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let (Command::Generate(args)
    | Command::Train(args)
    | Command::Evaluate(args)
    | Command::SweepBeta(args)
    | Command::Reproduce(args)) = &cli.command;
    let overrides = args.overrides()?;
    let cfg = config::load(args.config.as_deref(), &overrides)?;
    if let Command::Reproduce(_) = cli.command {
        return commands::reproduce(&cfg, &overrides, &cli.output_root);
    }
    let layout = Layout::new(&cli.output_root, &cfg);
    let outcome = match cli.command {
        Command::Generate(_) => {
            let o = commands::generate(&cfg, &layout)?;
            println!("{}", layout.data_dir.display());
            o
        }
        Command::Train(_) => commands::train(&cfg, &layout)?,
        Command::Evaluate(_) => commands::evaluate(&cfg, &layout)?,
        Command::SweepBeta(_) => commands::sweep_beta(&cfg, &layout)?,
        Command::Reproduce(_) => unreachable!(),
    };
    if !matches!(cli.command, Command::Generate(_)) {
        println!("{}", layout.run_dir.display());
    }
    Ok(outcome)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) if outcome.problems.is_empty() => ExitCode::SUCCESS,
        Ok(outcome) => {
            for p in &outcome.problems {
                eprintln!("problem: {p}");
            }
            eprintln!("{} replication(s) failed or were skipped", outcome.problems.len());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
