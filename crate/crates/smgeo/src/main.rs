use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use smgeo::checkpoint::Checkpoint;
use smgeo::config::RunConfig;
use smgeo::dataset::{generate_dataset, write_dataset, DataConfig, Dataset, Split};
use smgeo::eval::evaluate;
use smgeo::serve::{serve, AppState, Limits};
use smgeo::train::Trainer;
use smgeo::visuals::export_visuals;
use smgeo::{Error, Result};

#[derive(Parser)]
#[command(name = "smgeo", version, about = "Click-prompted cross-view object localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Data settings (TOML); defaults to the desk dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split and write the metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Overrides the dataset recorded in the checkpoint.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report path; defaults to `eval_<split>.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write heatmap, box and expert-activation images for some samples.
    ExportVisuals {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample ids; defaults to the first `--count` samples of `--split`.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve predictions over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn open_dataset(ck: &Checkpoint, dataset: Option<PathBuf>) -> Result<Dataset> {
    Dataset::load(&dataset.unwrap_or_else(|| ck.config.dataset.clone()))
}

fn beside(path: &Path, name: String) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    toml::from_str::<DataConfig>(&text).map_err(|e| Error::format(&p, e.to_string()))?
                }
                None => DataConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (manifest, samples) = generate_dataset(&cfg)?;
            write_dataset(&manifest, &samples, &out)?;
            log::info!("wrote {} samples to {}", samples.len(), out.display());
            for split in Split::ALL {
                log::info!("  {split}: {}", manifest.counts.get(split));
            }
        }
        Command::Train { config, seed, checkpoint } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let resume = checkpoint.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = Trainer::new(&cfg, resume)?.fit()?;
            if let Some(best) = outcome.best {
                log::info!("best checkpoint: {}", best.display());
            }
        }
        Command::Eval { checkpoint, split, dataset, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = open_dataset(&ck, dataset)?;
            let report = evaluate(&ck, &ds, split)?;
            let out = out.unwrap_or_else(|| beside(&checkpoint, format!("eval_{split}.json")));
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(&out, json + "\n").map_err(|e| Error::io(&out, e))?;
            print!("{}", report.table());
            log::info!("wrote {}", out.display());
        }
        Command::ExportVisuals { checkpoint, ids, split, count, dataset, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = open_dataset(&ck, dataset)?;
            let ids = if ids.is_empty() { ds.split(split).take(count).map(|r| r.id.clone()).collect() } else { ids };
            for v in export_visuals(&ck, &ds, &ids, &out)? {
                log::info!("{}: score {:.3}, box {:?}", v.id, v.prediction.score, v.prediction.bbox.to_array());
            }
            log::info!("wrote visuals for {} samples to {}", ids.len(), out.display());
        }
        Command::Serve { checkpoint, bind, dataset } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = match dataset {
                Some(p) => Some(Dataset::load(&p)?),
                None => Dataset::load(&ck.config.dataset).ok(),
            };
            let app = Arc::new(AppState::from_checkpoint(ck, ds, Limits::default())?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(format!("cannot start runtime: {e}")))?;
            rt.block_on(serve(app, bind))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if let Error::Aborted { last_good: Some(p), .. } = &e {
                log::error!("last good checkpoint: {}", p.display());
            }
            ExitCode::FAILURE
        }
    }
}
