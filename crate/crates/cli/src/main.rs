//! `fsnas`: split a search space, train K supernets, search, and score ranking fidelity.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "fsnas", version, about = "Few-shot NAS with nonlinearity-count space splitting")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Default, Args)]
struct Common {
    /// Builtin space name (nas201, desk27) or path to a space TOML.
    #[arg(long, global = true)]
    space: Option<String>,
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of supernets.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Channel divisor.
    #[arg(long, global = true)]
    g: Option<usize>,
    /// Splitting criterion: nonlinear_count, flops, linear_regions.
    #[arg(long, global = true)]
    criterion: Option<String>,
    /// Oracle CSV (encoding,dataset,accuracy,flops,params).
    #[arg(long, global = true)]
    oracle: Option<PathBuf>,
    /// Dataset name inside the oracle table.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Data directory with train/ and test/ splits instead of synthetic data.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Partition the space and write per-supernet statistics.
    Split,
    /// Train the supernets of an existing partition.
    Train {
        #[arg(long)]
        epochs: Option<u64>,
        /// sbs or uniform.
        #[arg(long)]
        mode: Option<String>,
        /// desk or full.
        #[arg(long)]
        preset: Option<String>,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this epoch; the LR schedule still spans --epochs.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Search for the best subnet with the trained supernets.
    Search {
        /// Resource cap such as flops:20000000 or params:5000.
        #[arg(long)]
        constraint: Option<String>,
        #[arg(long)]
        generations: Option<usize>,
        /// Evaluate every subnet instead of evolving.
        #[arg(long)]
        exhaustive: bool,
        /// supernet (inherited weights), supernet-loss, or oracle.
        #[arg(long, default_value = "supernet")]
        fitness: String,
    },
    /// Kendall tau of supernet estimates against an oracle table.
    EvalRank {
        #[arg(long)]
        top_m: Option<usize>,
    },
    /// List every subnet with its structural metrics as CSV.
    Enumerate {
        #[arg(long, default_value_t = 1_000_000)]
        limit: u64,
        /// Write to this file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train every subnet of a small space from scratch and write an oracle table.
    DeskOracle {
        #[arg(long)]
        epochs: Option<u64>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn build_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let c = &cli.common;
    if let Some(v) = &c.space {
        cfg.space = v.clone();
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if let Some(v) = c.k {
        cfg.partition.k = v;
    }
    if let Some(v) = c.g {
        cfg.supernet.g = v;
    }
    if let Some(v) = &c.criterion {
        cfg.partition.criterion = v.clone();
    }
    if let Some(v) = &c.oracle {
        cfg.eval.oracle = Some(v.clone());
    }
    if let Some(v) = &c.dataset {
        cfg.eval.dataset = Some(v.clone());
        cfg.oracle.dataset = v.clone();
    }
    if let Some(v) = &c.data_dir {
        cfg.data.dir = Some(v.clone());
    }
    match &cli.command {
        Command::Train { epochs, mode, preset, .. } => {
            if let Some(p) = preset {
                cfg.train.preset = p.clone();
            }
            if epochs.is_some() {
                cfg.train.epochs = *epochs;
            }
            if let Some(m) = mode {
                cfg.train.mode = Some(m.parse()?);
            }
        }
        Command::Search { constraint, generations, .. } => {
            if let Some(c) = constraint {
                cfg.evo.constraint = Some(commands::parse_constraint(c)?);
            }
            if let Some(g) = generations {
                cfg.evo.generations = *g;
            }
        }
        Command::EvalRank { top_m: Some(m) } => cfg.eval.top_m = *m,
        Command::DeskOracle { epochs, seeds } => {
            if let Some(e) = epochs {
                cfg.oracle.epochs = *e;
            }
            if let Some(s) = seeds {
                cfg.oracle.seeds = s.clone();
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if let Command::Enumerate { limit, output } = &cli.command {
        let space = fewshot_nas::SearchSpace::resolve(cli.common.space.as_deref().unwrap_or("desk27"))?;
        return commands::enumerate(&space, *limit, output.as_deref());
    }
    let cfg = build_config(&cli)?;
    match cli.command {
        Command::Split => commands::split(&cfg),
        Command::Train { resume, stop_after, .. } => commands::train(&cfg, resume, stop_after),
        Command::Search { exhaustive, fitness, .. } => commands::search(&cfg, exhaustive, &fitness),
        Command::EvalRank { .. } => commands::eval_rank(&cfg),
        Command::DeskOracle { .. } => commands::desk_oracle(&cfg),
        Command::Enumerate { .. } => unreachable!("handled above"),
    }
}

/// 2 for usage and configuration errors, 1 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fewshot_nas::Error>() {
            return if e.is_usage() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
