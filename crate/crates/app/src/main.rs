use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use inclg::commands;
use inclg::server::{self, ServerOptions};
use inclg_core::inference::InpaintModel;

#[derive(Parser)]
#[command(name = "inclg", version, about = "Face inpainting with joint landmark prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// `key=value` config override; repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Hyperparameter search over the config's search_* ranges.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Iterations per trial (default: one epoch).
        #[arg(long)]
        trial_iterations: Option<u64>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Inpaint the config's test split with a checkpoint.
    Test {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a checkpoint over HTTP. INCLG_CHECKPOINT and INCLG_PORT
    /// take precedence over the flags.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Requests run concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Requests that may wait before the server answers 429.
        #[arg(long, default_value_t = 8)]
        queue: usize,
    },
    /// Write a sorted list of the images under a directory.
    Flist {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "png,jpg,jpeg")]
        ext: Vec<String>,
    },
    /// Group masks by hole ratio and sample train/val lists per group.
    SplitMasks {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3300)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a small synthetic dataset and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        images: usize,
        #[arg(long, default_value_t = 16)]
        masks: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    inclg_core::alloc::retain_freed_memory();
    match Cli::parse().command {
        Command::Train { config, resume, overrides } => {
            let c = commands::load_config(&config, &overrides)?;
            let out = commands::train(&c, resume.as_deref())?;
            println!("checkpoints in {}", out.display());
        }
        Command::Tune { config, trials, trial_iterations, overrides } => {
            let c = commands::load_config(&config, &overrides)?;
            let r = commands::tune(&c, trials, trial_iterations)?;
            let best = &r.trials[r.best_trial];
            println!(
                "best trial {}: score {:.5} landmark_weight {} lr {} lr_decay {} batch_size {}",
                best.index, best.score, best.landmark_weight, best.lr, best.lr_decay, best.batch_size
            );
            println!("wrote {}", c.paths.output_dir.join("best_config.txt").display());
        }
        Command::Test { config, checkpoint, out } => {
            let c = commands::load_config(&config, &[])?;
            let s = commands::test(&c, &checkpoint, &out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Serve { checkpoint, port, host, workers, queue } => {
            let checkpoint = std::env::var_os("INCLG_CHECKPOINT").map(PathBuf::from).or(checkpoint).context("no checkpoint: pass --checkpoint or set INCLG_CHECKPOINT")?;
            let port = match std::env::var("INCLG_PORT") {
                Ok(p) => p.parse().with_context(|| format!("INCLG_PORT={p:?} is not a port"))?,
                Err(_) => port,
            };
            let model = InpaintModel::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(Arc::new(model), SocketAddr::new(host, port), ServerOptions { workers, queue }))?;
        }
        Command::Flist { root, out, ext } => {
            let n = commands::flist(&root, &out, &ext)?;
            println!("{n} files listed in {}", out.display());
        }
        Command::SplitMasks { masks, out, train, val, seed } => {
            commands::split_masks(&masks, &out, train, val, seed)?;
            println!("lists written to {}", out.display());
        }
        Command::Synth { out, images, masks, size, seed } => {
            let cfg = commands::synth(&out, images, masks, size, seed)?;
            println!("config written to {}", cfg.display());
        }
    }
    Ok(())
}
