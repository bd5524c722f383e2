mod common;

use std::path::Path;

use smgeo::checkpoint::Checkpoint;
use smgeo::config::RunConfig;
use smgeo::dataset::{Dataset, Split};
use smgeo::train::{EpochLog, Trainer, BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT};
use smgeo::Error;
use smgeo_core::gmoe::Insertion;

fn trainer(ds: &Dataset, cfg: &RunConfig, resume: Option<Checkpoint>) -> Trainer {
    cfg.check_paths().unwrap();
    Trainer::with_data(cfg, ds.load_split(Split::Train).unwrap(), ds.load_split(Split::Val).unwrap(), resume).unwrap()
}

/// Everything but wall time.
fn curve(h: &[EpochLog]) -> Vec<EpochLog> {
    h.iter().cloned().map(|l| EpochLog { seconds: 0.0, ..l }).collect()
}

/// Checkpoints equal up to their output paths.
fn same_run(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.config.hash() == b.config.hash()
        && a.state == b.state
        && a.optimizer == b.optimizer
        && a.rng == b.rng
        && (a.epoch, a.step, a.best_val_acc25) == (b.epoch, b.step, b.best_val_acc25)
}

fn setup(dir: &Path) -> Dataset {
    common::default_tiny_dataset(&dir.join("data"))
}

#[test]
fn same_seed_gives_identical_curves() {
    let dir = tempfile::tempdir().unwrap();
    let ds = setup(dir.path());
    let a = trainer(&ds, &common::tiny_config(&ds.dir, &dir.path().join("a")), None).fit().unwrap();
    let b = trainer(&ds, &common::tiny_config(&ds.dir, &dir.path().join("b")), None).fit().unwrap();
    assert_eq!(a.history.len(), 2);
    assert_eq!(curve(&a.history), curve(&b.history));
    assert!(same_run(&a.checkpoint, &b.checkpoint));
    for l in &a.history {
        assert!(l.loss.is_finite() && l.val.is_some());
        assert_eq!(l.steps, 2);
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = setup(dir.path());
    let full = trainer(&ds, &common::tiny_config(&ds.dir, &dir.path().join("full")), None).fit().unwrap();

    let cfg = common::tiny_config(&ds.dir, &dir.path().join("split"));
    let mut first = trainer(&ds, &cfg, None);
    first.run_epoch().unwrap();
    drop(first);
    let ck = Checkpoint::load(&cfg.checkpoint_dir.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ck.epoch, 1);
    let resumed = trainer(&ds, &cfg, Some(ck)).fit().unwrap();
    assert!(same_run(&resumed.checkpoint, &full.checkpoint));
    assert_eq!(curve(&resumed.history), curve(&full.history));

    let text = std::fs::read_to_string(cfg.checkpoint_dir.join(HISTORY_FILE)).unwrap();
    let logged: Vec<EpochLog> = serde_json::from_str(&text).unwrap();
    assert_eq!(curve(&logged), curve(&full.history));
    assert!(cfg.checkpoint_dir.join(BEST_CHECKPOINT).is_file());
    assert!(cfg.checkpoint_dir.join("config.toml").is_file());
}

#[test]
fn non_finite_parameters_abort_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = setup(dir.path());
    let cfg = common::tiny_config(&ds.dir, &dir.path().join("ck"));
    let mut t = trainer(&ds, &cfg, None);
    t.run_epoch().unwrap();
    let saved = std::fs::read(cfg.checkpoint_dir.join(LAST_CHECKPOINT)).unwrap();
    t.ck.state.params.tensors_mut()[0].data_mut()[0] = f64::NAN;
    match t.run_epoch() {
        Err(Error::Aborted { last_good: Some(p), .. }) => {
            assert_eq!(p, cfg.checkpoint_dir.join(LAST_CHECKPOINT));
            assert_eq!(std::fs::read(&p).unwrap(), saved);
            Checkpoint::load(&p).unwrap();
        }
        other => panic!("expected an abort, got {other:?}"),
    }
}

#[test]
fn usage_counts_cover_every_routed_token() {
    let dir = tempfile::tempdir().unwrap();
    let ds = setup(dir.path());
    let cfg = common::tiny_config(&ds.dir, &dir.path().join("ck"));
    let mut t = trainer(&ds, &cfg, None);
    let log = t.run_epoch().unwrap();
    let g = &cfg.model.gmoe;
    let b = &cfg.model.backbone;
    let samples = log.steps * cfg.batch_size;
    // The grid shrinks to the map on stages smaller than it.
    let cells = |extent: (usize, usize), stage: usize| {
        let side = |n: usize, g: usize| (n / (b.patch_size << stage)).min(g);
        side(extent.0, g.grid.0) * side(extent.1, g.grid.1)
    };
    assert!(!log.expert_usage.is_empty());
    for (key, counts) in &log.expert_usage {
        let stage: usize = key[5..6].parse().unwrap();
        assert_eq!(counts.len(), g.num_experts, "{key}");
        let per_sample = cells(b.query_extent, stage) + cells(b.reference_extent, stage);
        assert_eq!(counts.iter().sum::<usize>(), samples * per_sample * g.top_k, "{key}");
    }
    let h = log.gating_entropy.unwrap();
    assert!(h >= 0.0 && h <= (g.top_k as f64).ln() + 1e-9);
    assert!((log.entropy_term.unwrap() + h).abs() < 1e-9);
}

#[test]
fn dense_variant_logs_no_routing() {
    let dir = tempfile::tempdir().unwrap();
    let ds = setup(dir.path());
    let mut cfg = common::tiny_config(&ds.dir, &dir.path().join("ck"));
    cfg.model.gmoe.insertion = [Insertion::None; 4];
    let log = trainer(&ds, &cfg, None).run_epoch().unwrap();
    assert!(log.expert_usage.is_empty());
    assert_eq!(log.gating_entropy, None);
    assert_eq!(log.entropy_term, None);
}

#[test]
fn empty_training_split_is_rejected() {
    let cfg = RunConfig::default();
    assert!(matches!(Trainer::with_data(&cfg, Vec::new(), Vec::new(), None), Err(Error::Validation(_))));
}
