use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tealab_cli::results::mean_ratios;
use tealab_cli::{cmd_baselines, cmd_eval, cmd_generate, cmd_reproduce, cmd_sl, cmd_train, diff_runs, Run};
use tealab_core::rl::ActionMode;

#[derive(Debug, Parser)]
#[command(name = "tealab", version, about = "Traffic-engineering experiments with learned routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Master seed
    #[arg(long)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Direct,
    Softmin,
}

impl From<Mode> for ActionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Direct => ActionMode::Direct,
            Mode::Softmin => ActionMode::Softmin,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train and test demand sequences
    Generate(Common),
    /// Score the Prev, Avg_k and oblivious baselines on the test sequences
    Baselines(Common),
    /// Train a routing policy and score it on the test sequences
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `trainer.mode`
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Score a saved policy on the test sequences
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load instead of `<out>/policy.txt`
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Fit the demand predictor and write its loss curve
    Sl(Common),
    /// Run every stage; optionally compare CSVs against an earlier run
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// Earlier run directory whose CSVs must match byte for byte
        #[arg(long)]
        check: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let open = |c: &Common| Run::new(&c.config, c.seed, &c.out);
    let summary = |rows: &[tealab_cli::ResultRow]| {
        for (method, mean) in mean_ratios(rows) {
            println!("{method:>12}  mean ratio {mean:.4}");
        }
    };
    match cli.command {
        Command::Generate(c) => {
            let data = cmd_generate(&open(&c)?)?;
            println!(
                "wrote {} train and {} test sequences to {}",
                data.train.len(),
                data.test.len(),
                c.out.display()
            );
        }
        Command::Baselines(c) => summary(&cmd_baselines(&open(&c)?)?),
        Command::Train { common, mode } => summary(&cmd_train(&open(&common)?, mode.map(Into::into))?),
        Command::Eval { common, policy } => summary(&cmd_eval(&open(&common)?, policy.as_deref())?),
        Command::Sl(c) => {
            let o = cmd_sl(&open(&c)?)?;
            println!(
                "test loss {:.6} -> {:.6} over {} epochs",
                o.test[0],
                o.test.last().unwrap(),
                o.test.len() - 1
            );
        }
        Command::Reproduce { common, check } => {
            summary(&cmd_reproduce(&open(&common)?)?);
            if let Some(other) = check {
                let diffs = diff_runs(&common.out, &other)?;
                if !diffs.is_empty() {
                    anyhow::bail!("outputs differ from {}:\n  {}", other.display(), diffs.join("\n  "));
                }
                println!("all CSV outputs match {}", other.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
