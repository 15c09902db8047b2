use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use vdformer::config::{RunConfig, VERSION};
use vdformer::detection::FusionMode;
use vdformer::pipeline::{self, Split};
use vdformer::{Error, Result};

#[derive(Parser)]
#[command(name = "vdformer", version = VERSION, about = "View-disentangled transformer lesion detection on synthetic volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (train / val / test splits).
    Gen(Common),
    /// Train a detector on the train split, checkpointing every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Tabulate attention cost, full 3D versus view-disentangled.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted (eval falls back
    /// to the configuration stored in the checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to paths.data_dir for gen and
    /// paths.run_dir otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    FusionMode::parse(s).map_err(|e| e.to_string())
}

impl Common {
    fn config(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(ck)) => pipeline::checkpoint_config(ck)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(f) = self.fusion {
            cfg.model.fusion = f;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = c.config(None)?;
            let out = c.out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let m = pipeline::cmd_gen(&cfg, &out)?;
            info!("wrote {} volumes to {}", m.volumes.len(), out.display());
        }
        Command::Train { common, checkpoint } => {
            let cfg = common.config(None)?;
            let out = common.out.unwrap_or_else(|| cfg.paths.run_dir.clone());
            let s = pipeline::cmd_train(&cfg, &cfg.paths.data_dir, &out, checkpoint.as_deref())?;
            info!(
                "{} steps, last-epoch mean loss {:.5}, checkpoint {}",
                s.steps,
                s.final_epoch_mean_loss,
                s.checkpoint.display()
            );
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = common.config(Some(&checkpoint))?;
            let out = common.out.unwrap_or_else(|| cfg.paths.run_dir.clone());
            let r = pipeline::cmd_eval(&cfg, &checkpoint, &cfg.paths.data_dir, split, &out)?;
            println!("{}", serde_json::to_string_pretty(&r.metrics)?);
        }
        Command::Bench(c) => {
            let cfg = c.config(None)?;
            let out = c.out.unwrap_or_else(|| cfg.paths.run_dir.clone());
            let rows = pipeline::cmd_bench(&cfg, &out)?;
            info!("{} rows written to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Validation(problems)) => {
            error!("invalid configuration:");
            for p in problems {
                error!("  {p}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
