//! Command-line front end: configuration, subcommands and exit codes.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use miga::metrics::PortfolioMode;

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "miga", version, about = "Mixture of grouped experts for cross-sectional stock ranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Portfolio mode: long_only or long_short.
    #[arg(long, global = true)]
    pub mode: Option<PortfolioMode>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic panel.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the configured panel.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from a checkpoint carrying training state.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Ranking and portfolio metrics on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also report every expert slot on its own.
        #[arg(long)]
        experts: bool,
    },
    /// Daily portfolio series on the test split.
    Backtest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient check on a small random instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_grad: Option<String>,
    },
}

pub fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
        mode: common.mode,
    });
    Ok(cfg)
}

/// Runs one subcommand, printing its human-readable result to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = resolve_config(&common)?;
            log::info!("gen: root seed {}", cfg.seed);
            let out = commands::cmd_gen(&cfg)?;
            println!("{}", out.panel.display());
        }
        Command::Train { common, checkpoint } => {
            let cfg = resolve_config(&common)?;
            log::info!("train: root seed {}, model {}", cfg.seed, cfg.model_spec(0).describe());
            let s = commands::cmd_train(&cfg, checkpoint.as_deref())?;
            println!(
                "epochs {}  best epoch {}  best val IC {}{}",
                s.epochs,
                s.best_epoch.map_or("-".into(), |e| e.to_string()),
                s.best_val_ic.map_or("n/a".into(), |v| format!("{v:.4}")),
                if s.stopped_early { "  (early stop)" } else { "" }
            );
            println!("{}", s.best_checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            experts,
        } => {
            let cfg = resolve_config(&common)?;
            log::info!("eval: root seed {}", cfg.seed);
            let out = commands::cmd_eval(&cfg, checkpoint.as_deref(), experts)?;
            print!("{}", out.table);
        }
        Command::Backtest { common, checkpoint } => {
            let cfg = resolve_config(&common)?;
            log::info!("backtest: root seed {}", cfg.seed);
            let r = commands::cmd_backtest(&cfg, checkpoint.as_deref())?;
            println!(
                "days {}  AR {:.4}  IR {}",
                r.days.len(),
                r.ar,
                r.ir.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Gradcheck { common, corrupt_grad } => {
            let cfg = resolve_config(&common)?;
            log::info!("gradcheck: root seed {}", cfg.seed);
            let report = commands::cmd_gradcheck(&cfg, corrupt_grad.as_deref())?;
            print!("{}", report.render());
            if !report.passed {
                let failed = report
                    .groups
                    .iter()
                    .filter(|g| !g.passed)
                    .map(|g| g.name.clone())
                    .collect();
                return Err(CliError::GradcheckFailed(failed));
            }
        }
    }
    Ok(())
}
