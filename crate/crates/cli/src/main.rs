use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use contrastmix::adapt::Stage;
use contrastmix_cli::pipeline;
use contrastmix_cli::RunConfig;

#[derive(Parser)]
#[command(name = "contrastmix", version, about = "Contrast-to-non-contrast organ segmentation adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired phantom dataset.
    Phantom {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (default: data_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        seed: Option<u64>,
        /// Run root (default: out_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one volume, or every test subject when --volume is absent.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Stage the checkpoint belongs to.
        #[arg(long, default_value = "student_contrastmix")]
        stage: Stage,
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Label file used as the coarse prior.
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output label file (single volume) or directory (test split).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Second prediction directory for a paired comparison.
        #[arg(long)]
        pred_b: Option<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the student over the temperature and Beta grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CONTRASTMIX_THREADS") {
        let n: usize = v.parse().with_context(|| format!("CONTRASTMIX_THREADS={v:?} is not a count"))?;
        if n == 0 {
            bail!("CONTRASTMIX_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Phantom { config, out } => {
            let cfg = load(&config, None, None)?;
            let dir = pipeline::cmd_phantom(&cfg, out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Train { config, stage, seed, out } => {
            let cfg = load(&config, seed, out)?;
            let trained = pipeline::cmd_train(&cfg, stage)?;
            if let Some((epoch, loss)) = contrastmix::adapt::epoch_means(&trained.log).last() {
                log::info!("final epoch {epoch}: mean loss {loss}");
            }
            println!("{}", pipeline::stage_dir(&cfg, stage).display());
        }
        Command::Infer { config, checkpoint, stage, volume, prior, seed, out } => {
            let cfg = load(&config, seed, None)?;
            let net = pipeline::load_network(&cfg, stage, &checkpoint)?;
            match volume {
                Some(v) => {
                    pipeline::cmd_infer_single(&cfg, &net, &v, prior.as_deref(), &out)?;
                }
                None => {
                    if prior.is_some() {
                        bail!("--prior applies to a single --volume");
                    }
                    pipeline::cmd_infer_batch(&cfg, &net, &out)?;
                }
            }
            println!("{}", out.display());
        }
        Command::Eval { pred, pred_b, truth, out } => {
            let report = pipeline::cmd_eval(&pred, pred_b.as_deref(), &truth, &out)?;
            println!("mean dice {:.4}", report.mean_dice());
        }
        Command::Ablate { config, seed, out } => {
            let cfg = load(&config, seed, out)?;
            println!("{}", pipeline::cmd_ablate(&cfg)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
