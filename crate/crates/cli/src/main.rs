//! `storbid` command-line front end.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "storbid", version, about = "Decision-focused storage bidding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; relative paths resolve under $STORBID_RUN_ROOT when set.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic market series.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        days: Option<usize>,
    },
    /// Validate a market CSV and build the labelled dataset.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the predictor on prediction error.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune with the decision-focused loss.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint, usually from `pretrain`.
        #[arg(long)]
        weights: PathBuf,
        /// Treat `weights` as a mid-run checkpoint and continue its epochs.
        #[arg(long)]
        resume: bool,
    },
    /// Bid curve for one interval.
    Bid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Decision interval index in the series.
        #[arg(long)]
        t: usize,
        /// SoC before the interval; defaults to the configured initial SoC.
        #[arg(long)]
        soc: Option<f64>,
        /// Also write the differentiated KKT system and dθ/dλ̂.
        #[arg(long)]
        dump_kkt: bool,
    },
    /// Rolling-horizon simulation.
    Backtest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Required except in `perfect_foresight` mode.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// `df`, `three_stage` or `perfect_foresight`.
        #[arg(long, default_value = "df")]
        mode: String,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        end: Option<usize>,
    },
    /// Compare two backtest run directories.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of the KKT and loss gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random instances per check.
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match commands::dispatch(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}
