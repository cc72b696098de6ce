//! `curio-rank`: drives the curio-core pipeline from a TOML config.
//!
//! Exit codes: 0 ok, 1 stage failure, 2 I/O, 3 missing upstream snapshot,
//! 4 bad argument.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use curio_core::config::{ConfigError, PipelineConfig};
use curio_core::corpus::Percent;
use curio_core::pipeline::{Pipeline, PipelineError, Stage};

#[derive(Debug, Parser)]
#[command(name = "curio-rank", version, about = "Curiosity-weighted serendipity re-ranking pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags override the matching config keys.
#[derive(Debug, Args)]
struct Overrides {
    /// TOML config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Session share for short-term preferences, in percent.
    #[arg(long, global = true)]
    x: Option<u32>,
    /// Cutoffs for the metrics, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Recompute stages even when their snapshot exists.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Debug logging.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse ratings, subsample users and write the leave-last-out split.
    Ingest,
    /// Fit the long-term factorization model.
    TrainMf,
    /// Fit the time-aware sequence model on session suffixes.
    TrainSeq,
    /// Fit the click-through-rate usefulness model.
    TrainCtr,
    /// Compute per-user curiosity profiles.
    Curiosity,
    /// Score test candidates and write re-ranked lists.
    Recommend,
    /// Compare ranking strategies and write the metrics report.
    Evaluate,
    /// Retrain the sequence model per session share and write curiosity scatter data.
    SweepX {
        /// Session shares in percent, comma separated; overrides the config grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<u32>>,
    },
    /// Print a user's long- and short-term preference tables.
    InspectUser {
        user: u32,
    },
    /// Run every stage in order, or only `--stage`.
    Run {
        #[arg(long)]
        stage: Option<String>,
    },
}

fn percent(value: u32) -> Result<Percent, PipelineError> {
    Percent::new(value).map_err(|e| ConfigError::Invalid(e.to_string()).into())
}

fn build_config(o: &Overrides, command: &Command) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &o.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(x) = o.x {
        cfg.x = percent(x)?;
    }
    if let Some(k) = &o.k {
        cfg.ks = k.clone();
    }
    if let Some(threads) = o.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &o.out {
        cfg.out = out.clone();
    }
    if let Command::SweepX { values: Some(values) } = command {
        cfg.sweep_x = values.iter().map(|&v| percent(v)).collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = build_config(&cli.overrides, &cli.command)?;
    let pipeline = Pipeline::new(cfg, cli.overrides.force);
    log::debug!("config hash {}", pipeline.config_hash());
    let stage = match &cli.command {
        Command::Ingest => Stage::Ingest,
        Command::TrainMf => Stage::TrainMf,
        Command::TrainSeq => Stage::TrainSeq,
        Command::TrainCtr => Stage::TrainCtr,
        Command::Curiosity => Stage::Curiosity,
        Command::Recommend => Stage::Recommend,
        Command::Evaluate => Stage::Evaluate,
        Command::SweepX { .. } => Stage::SweepX,
        Command::InspectUser { user } => {
            print!("{}", pipeline.inspect_user(*user)?);
            return Ok(());
        }
        Command::Run { stage: Some(name) } => name.parse()?,
        Command::Run { stage: None } => {
            pipeline.run()?;
            log::info!("artifacts in {}", pipeline.out_dir().display());
            return Ok(());
        }
    };
    pipeline.run_stage(stage)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.overrides.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
