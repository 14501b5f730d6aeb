//! `lobgen`: data ingestion, training, generation and evaluation for
//! generative order-book models.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::*;
use crate::config::{RunConfig, DATA_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "lobgen", version, about = "Generative modeling of limit order book message streams")]
pub struct Cli {
    /// TOML run configuration. Flags override it, it overrides defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0: one per core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root for relative raw and dataset directories.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DayArgs {
    #[arg(long)]
    pub symbol: Option<String>,
    /// Comma-separated dates (YYYY-MM-DD).
    #[arg(long, value_delimiter = ',')]
    pub dates: Vec<String>,
    #[arg(long)]
    pub raw_dir: Option<PathBuf>,
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic LOBSTER-format days.
    Synth {
        #[command(flatten)]
        days: DayArgs,
        #[arg(long, default_value_t = 3)]
        n_days: usize,
        #[arg(long, default_value_t = 20_000)]
        messages: usize,
    },
    /// Parse, filter, preprocess and persist LOBSTER days.
    Ingest {
        #[command(flatten)]
        days: DayArgs,
    },
    /// Same as ingest; rebuilds datasets, e.g. with another book width.
    Preprocess {
        #[command(flatten)]
        days: DayArgs,
        #[arg(long)]
        book_width: Option<usize>,
    },
    /// Write token streams of the datasets.
    Encode {
        #[command(flatten)]
        days: DayArgs,
    },
    Train {
        #[command(flatten)]
        days: DayArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    Generate {
        #[command(flatten)]
        days: DayArgs,
        /// Defaults to `final.ckpt` in the checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    Eval {
        #[command(flatten)]
        days: DayArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Verify stored volume images against a replay of the messages.
    ReplayCheck {
        #[command(flatten)]
        days: DayArgs,
        /// Dataset `.bin` files; all datasets when omitted.
        datasets: Vec<PathBuf>,
    },
}

fn apply_days(cfg: &mut RunConfig, d: &DayArgs) {
    if let Some(s) = &d.symbol {
        cfg.symbol = s.clone();
    }
    if !d.dates.is_empty() {
        cfg.dates = d.dates.clone();
    }
    if let Some(p) = &d.raw_dir {
        cfg.raw_dir = p.clone();
    }
    if let Some(p) = &d.dataset_dir {
        cfg.dataset_dir = p.clone();
    }
}

/// Effective config: defaults, then the file, then flags.
pub fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    match &cli.command {
        Command::Synth { days, .. }
        | Command::Ingest { days }
        | Command::Encode { days }
        | Command::ReplayCheck { days, .. } => apply_days(&mut cfg, days),
        Command::Preprocess { days, book_width } => {
            apply_days(&mut cfg, days);
            if let Some(w) = book_width {
                cfg.book_width = *w;
            }
        }
        Command::Train { days, epochs, max_steps } => {
            apply_days(&mut cfg, days);
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            if let Some(s) = max_steps {
                cfg.max_steps = *s;
            }
        }
        Command::Generate { days, sequences, steps, .. } => {
            apply_days(&mut cfg, days);
            if let Some(s) = sequences {
                cfg.generate_sequences = *s;
            }
            if let Some(s) = steps {
                cfg.generate_steps = *s;
            }
        }
        Command::Eval {
            days,
            sequences,
            context,
            steps,
            ..
        } => {
            apply_days(&mut cfg, days);
            if let Some(s) = sequences {
                cfg.eval_sequences = *s;
            }
            if let Some(c) = context {
                cfg.eval_context = *c;
            }
            if let Some(s) = steps {
                cfg.eval_steps = *s;
            }
        }
    }
    Ok(cfg.with_data_root(cli.data_root.as_deref()))
}

pub fn run(cli: Cli) -> anyhow::Result<bool> {
    let cfg = effective_config(&cli)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global()?;
    }
    let out = |default: &PathBuf| cli.out.clone().unwrap_or_else(|| default.clone());
    let ckpt = |c: &Option<PathBuf>| c.clone().unwrap_or_else(|| cfg.checkpoint_dir.join("final.ckpt"));
    match &cli.command {
        Command::Synth { n_days, messages, .. } => {
            cmd_synth(&cfg, &out(&cfg.raw_dir), *n_days, *messages)?;
        }
        Command::Ingest { .. } | Command::Preprocess { .. } => {
            cmd_ingest(&cfg, &out(&cfg.dataset_dir))?;
        }
        Command::Encode { .. } => {
            cmd_encode(&cfg, &out(&cfg.dataset_dir))?;
        }
        Command::Train { .. } => {
            let s = cmd_train(&cfg, &out(&cfg.checkpoint_dir))?;
            println!("wrote {} after {} steps", s.checkpoint.display(), s.steps);
        }
        Command::Generate { checkpoint, .. } => {
            cmd_generate(&cfg, &ckpt(checkpoint), &out(&cfg.report_dir))?;
        }
        Command::Eval { checkpoint, .. } => {
            cmd_eval(&cfg, &ckpt(checkpoint), &out(&cfg.report_dir))?;
        }
        Command::ReplayCheck { datasets, .. } => {
            let files = if datasets.is_empty() {
                dataset_files(&cfg)?
            } else {
                datasets.iter().map(|b| (b.clone(), b.with_extension("json"))).collect()
            };
            let results = cmd_replay_check(&files)?;
            return Ok(results.iter().all(ReplayResult::passed));
        }
    }
    Ok(true)
}

pub fn main_with(cli: Cli) -> ExitCode {
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
