//! The training loop: shuffled, augmented minibatches, warmup + cosine Adam,
//! per-epoch validation and checkpointing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smgeo_core::gmoe::expert_usage;
use smgeo_core::head::BBox;
use smgeo_core::model::{Batch, Model};

use crate::augment::augment;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, EvalReport};
use crate::imaging::batch_tensor;
use crate::synth::CrossViewSample;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.json";

/// Stacks samples into a model batch plus their boxes.
pub fn make_batch<'a>(samples: impl IntoIterator<Item = &'a CrossViewSample> + Clone) -> Result<(Batch, Vec<BBox>)> {
    let query = batch_tensor(samples.clone().into_iter().map(|s| &s.query))?;
    let reference = batch_tensor(samples.clone().into_iter().map(|s| &s.reference))?;
    let clicks = samples.clone().into_iter().map(|s| s.click).collect();
    let gts = samples.into_iter().map(|s| s.gt).collect();
    Ok((Batch { query, reference, clicks }, gts))
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss: f64,
    pub heatmap: f64,
    pub bbox: f64,
    /// Mean `Σ g ln g` term of the objective.
    pub entropy_term: Option<f64>,
    /// Mean routing entropy over every routed grid.
    pub gating_entropy: Option<f64>,
    /// Selections per expert, keyed by `stage{s}.block{b}`, both views pooled.
    pub expert_usage: BTreeMap<String, Vec<usize>>,
    pub grad_norm: f64,
    pub val: Option<EvalReport>,
    pub seconds: f64,
}

impl EpochLog {
    /// Smallest per-expert count across every routed block.
    pub fn min_expert_usage(&self) -> Option<usize> {
        self.expert_usage.values().flatten().copied().min()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub best: Option<PathBuf>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub ck: Checkpoint,
    pub train: Vec<CrossViewSample>,
    pub val: Vec<CrossViewSample>,
    pub history: Vec<EpochLog>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Loads the configured dataset; `resume` must come from the same configuration.
    pub fn new(cfg: &RunConfig, resume: Option<Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        cfg.check_paths()?;
        let ds = Dataset::load(&cfg.dataset)?;
        let (qh, qw) = cfg.model.backbone.query_extent;
        let (rh, rw) = cfg.model.backbone.reference_extent;
        if ds.manifest.query_extent != [qh, qw] || ds.manifest.reference_extent != [rh, rw] {
            return Err(Error::Config(format!(
                "dataset extents {:?}/{:?} do not match the model's {:?}/{:?}",
                ds.manifest.query_extent, ds.manifest.reference_extent, (qh, qw), (rh, rw)
            )));
        }
        let train = ds.load_split(Split::Train)?;
        let val = ds.load_split(Split::Val)?;
        Self::with_data(cfg, train, val, resume)
    }

    pub fn with_data(cfg: &RunConfig, train: Vec<CrossViewSample>, val: Vec<CrossViewSample>, resume: Option<Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Validation("the training split is empty".into()));
        }
        let (model, ck) = match resume {
            Some(ck) => {
                ck.ensure_compatible(cfg)?;
                (ck.model()?, ck)
            }
            None => Checkpoint::initial(cfg)?,
        };
        let mut ck = ck;
        ck.config = cfg.clone();
        let rng = ck.rng.restore()?;
        let history = load_history(&cfg.checkpoint_dir.join(HISTORY_FILE), ck.epoch);
        Ok(Self { cfg: cfg.clone(), model, ck, train, val, history, rng })
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.train.len().div_ceil(self.cfg.batch_size);
        self.cfg.max_steps_per_epoch.map_or(n, |m| n.min(m))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.checkpoint_dir.join(name)
    }

    /// Trains one epoch, validates, and writes `last.ckpt` (and `best.ckpt` on improvement).
    /// A non-finite value aborts with the previous `last.ckpt` left in place.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let start = Instant::now();
        let epoch = self.ck.epoch + 1;
        let steps = self.steps_per_epoch();
        let schedule = self.cfg.schedule(steps);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sums = [0.0; 4];
        let mut ent_sum = 0.0;
        let mut ent_n = 0usize;
        let (mut gate_sum, mut gate_n) = (0.0, 0usize);
        let mut usage: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut lr = 0.0;
        for chunk in order.chunks(self.cfg.batch_size).take(steps) {
            let samples: Vec<CrossViewSample> = chunk.iter().map(|&i| augment(&self.train[i], &mut self.rng, &self.cfg.augment)).collect();
            let (batch, gts) = make_batch(&samples)?;
            lr = schedule.lr(self.ck.step);
            let stats = self
                .model
                .train_step(&mut self.ck.state, &mut self.ck.optimizer, &batch, &gts, lr, self.cfg.grad_clip)
                .map_err(|e| self.abort(epoch, e.into()))?;
            self.ck.step += 1;
            sums[0] += stats.loss;
            sums[1] += stats.heatmap;
            sums[2] += stats.bbox;
            sums[3] += stats.grad_norm;
            if let Some(e) = stats.entropy_term {
                ent_sum += e;
                ent_n += 1;
            }
            for r in &stats.gates {
                let counts = expert_usage([&r.decision], r.decision.num_experts);
                let slot = usage.entry(format!("stage{}.block{}", r.stage, r.block)).or_insert_with(|| vec![0; counts.len()]);
                slot.iter_mut().zip(counts).for_each(|(a, b)| *a += b);
                gate_sum += r.decision.entropy.iter().sum::<f64>();
                gate_n += r.decision.entropy.len();
            }
        }
        let gating = (gate_n > 0).then(|| gate_sum / gate_n as f64);
        let mean = |v: f64| v / steps as f64;
        let val = if self.val.is_empty() {
            None
        } else {
            Some(evaluate_samples(&self.model, &self.ck.state, &self.val, self.cfg.batch_size)?)
        };

        self.ck.epoch = epoch;
        self.ck.rng = RngState::capture(&self.rng);
        let improved = match (&val, self.ck.best_val_acc25) {
            (Some(v), Some(best)) => v.acc25 > best,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.ck.best_val_acc25 = val.as_ref().map(|v| v.acc25);
        }
        self.ck.save(&self.path(LAST_CHECKPOINT))?;
        if improved {
            self.ck.save(&self.path(BEST_CHECKPOINT))?;
        }

        let log = EpochLog {
            epoch,
            steps,
            lr,
            loss: mean(sums[0]),
            heatmap: mean(sums[1]),
            bbox: mean(sums[2]),
            entropy_term: (ent_n > 0).then(|| ent_sum / ent_n as f64),
            gating_entropy: gating,
            expert_usage: usage,
            grad_norm: mean(sums[3]),
            val,
            seconds: start.elapsed().as_secs_f64(),
        };
        log_epoch(&log);
        self.history.push(log.clone());
        let hpath = self.path(HISTORY_FILE);
        let text = serde_json::to_string_pretty(&self.history).expect("history serializes");
        std::fs::write(&hpath, text).map_err(|e| Error::io(&hpath, e))?;
        Ok(log)
    }

    fn abort(&self, epoch: usize, err: Error) -> Error {
        let non_finite = matches!(
            err,
            Error::Model(smgeo_core::Error::NonFinite(_)) | Error::Model(smgeo_core::Error::NonFiniteLoss(_))
        );
        if !non_finite {
            return err;
        }
        let last = self.path(LAST_CHECKPOINT);
        let last_good = last.is_file().then_some(last);
        log::error!("non-finite value in epoch {epoch} at step {}: {err}", self.ck.step);
        Error::Aborted { msg: format!("epoch {epoch}, step {}: {err}", self.ck.step), last_good }
    }

    /// Runs the remaining epochs.
    pub fn fit(mut self) -> Result<TrainOutcome> {
        log::info!("run configuration:\n{}", self.cfg.to_toml());
        log::info!(
            "{} train / {} val samples, {} steps per epoch, {} parameters",
            self.train.len(),
            self.val.len(),
            self.steps_per_epoch(),
            self.ck.state.params.num_scalars()
        );
        std::fs::write(self.path("config.toml"), self.cfg.to_toml()).map_err(|e| Error::io(&self.path("config.toml"), e))?;
        while self.ck.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        let best = Some(self.path(BEST_CHECKPOINT)).filter(|p| p.is_file());
        Ok(TrainOutcome { checkpoint: self.ck, history: self.history, best })
    }
}

fn load_history(path: &Path, epochs: usize) -> Vec<EpochLog> {
    if epochs == 0 {
        return Vec::new();
    }
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<Vec<EpochLog>>(&t).ok())
        .map(|mut h| {
            h.truncate(epochs);
            h
        })
        .unwrap_or_default()
}

fn log_epoch(l: &EpochLog) {
    let val = l.val.as_ref().map_or("-".to_string(), |v| format!("acc25 {:.4} acc50 {:.4} miou {:.4}", v.acc25, v.acc50, v.miou));
    log::info!(
        "epoch {} | loss {:.4} (heat {:.4}, box {:.4}, ent {}) | gating entropy {} | lr {:.2e} | val {} | {:.1}s",
        l.epoch,
        l.loss,
        l.heatmap,
        l.bbox,
        l.entropy_term.map_or("-".into(), |e| format!("{e:.4}")),
        l.gating_entropy.map_or("-".into(), |e| format!("{e:.4}")),
        l.lr,
        val,
        l.seconds
    );
    for (k, v) in &l.expert_usage {
        log::info!("  expert usage {k}: {v:?}");
    }
}
