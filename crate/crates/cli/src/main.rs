mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ConfigArgs;

/// Continual prompt learning for a frozen dual-encoder model: generate a
/// multi-domain benchmark, pretrain the encoders, train one prompt set per
/// task into a retrieval pool and evaluate forgetting-free accuracy.
#[derive(Parser)]
#[command(name = "duet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark to .cpds dataset files
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for dataset files and the manifest
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the frozen backbone on the base split, separate task keys and
    /// write backbone plus calibrated task files
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding the generated datasets
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the backbone and calibrated tasks
        #[arg(long)]
        out: PathBuf,
    },
    /// Train prompts task by task and write pool snapshots plus metrics
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory produced by pretrain (backbone + tasks)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for pools, metrics and the run record
        #[arg(long)]
        out: PathBuf,
        /// Task order as comma-separated indices into the on-disk order,
        /// e.g. "2,0,1"
        #[arg(long)]
        order: Option<String>,
        /// Keep only this many training images per class and switch to the
        /// few-shot iteration count
        #[arg(long)]
        few_shot: Option<usize>,
    },
    /// Recompute metrics from saved pool snapshots; reproduces the train
    /// command's metrics files byte for byte
    Eval {
        /// Directory produced by pretrain (backbone + tasks)
        #[arg(long)]
        data: PathBuf,
        /// Directory produced by train (pool snapshots + run record)
        #[arg(long)]
        pool_dir: PathBuf,
        /// Output directory for the recomputed metrics
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate over a grid of knob values
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory produced by pretrain (backbone + tasks)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for sweep.csv
        #[arg(long)]
        out: PathBuf,
        /// Grid axis like "depth=0,2,4" or "plen=1,2,4"; repeat for a
        /// cartesian product
        #[arg(long = "axis")]
        axes: Vec<String>,
    },
    /// Print the contents of a saved prompt pool
    InspectPool {
        /// Pool file (.cpp1)
        #[arg(long)]
        pool: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { config, out } => commands::gen(config, out),
        Command::Pretrain { config, data, out } => commands::pretrain(config, data, out),
        Command::Train {
            config,
            data,
            out,
            order,
            few_shot,
        } => commands::train(&commands::TrainArgs {
            config,
            data,
            out,
            order: order.as_deref(),
            few_shot: *few_shot,
        }),
        Command::Eval {
            data,
            pool_dir,
            out,
        } => commands::eval(data, pool_dir, out),
        Command::Sweep {
            config,
            data,
            out,
            axes,
        } => commands::sweep(&commands::SweepArgs {
            config,
            data,
            out,
            axes,
        }),
        Command::InspectPool { pool } => commands::inspect_pool(pool),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
