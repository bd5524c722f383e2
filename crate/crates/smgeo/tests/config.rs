use std::path::PathBuf;

use smgeo::config::RunConfig;
use smgeo::Error;

#[test]
fn defaults_match_the_training_recipe() {
    let c = RunConfig::default();
    assert_eq!(c.optimizer.lr, 1e-4);
    assert_eq!(c.optimizer.betas, (0.9, 0.999));
    assert_eq!(c.optimizer.weight_decay, 0.0);
    assert_eq!((c.batch_size, c.epochs), (8, 25));
    assert_eq!(c.schedule.warmup_fraction, 0.05);
    assert_eq!(c.grad_clip, Some(5.0));
    let m = &c.model;
    assert_eq!((m.gmoe.num_experts, m.gmoe.top_k), (6, 2));
    assert_eq!((m.loss.alpha, m.loss.mu, m.loss.lambda), (0.9, 1.1, 0.015));
    c.validate().unwrap();
}

#[test]
fn toml_round_trip() {
    let c = RunConfig::default();
    let text = c.to_toml();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    assert_eq!(RunConfig::from_toml("").unwrap(), c);
}

#[test]
fn sections_override_defaults() {
    let c = RunConfig::from_toml(
        r#"
        seed = 3
        epochs = 4
        [optimizer]
        lr = 2e-4
        betas = [0.8, 0.99]
        [schedule]
        warmup_steps = 7
        cosine_total_steps = 100
        [model.gmoe]
        num_experts = 4
        insertion = ["none", "none", "even", "all"]
        [model.loss]
        lambda = 0.0
        [augment]
        flip = false
        "#,
    )
    .unwrap();
    assert_eq!((c.seed, c.epochs), (3, 4));
    assert_eq!(c.optimizer.lr, 2e-4);
    assert_eq!(c.optimizer.betas, (0.8, 0.99));
    assert_eq!(c.model.gmoe.num_experts, 4);
    assert_eq!(c.model.loss.lambda, 0.0);
    assert!(!c.augment.flip);
    let s = c.schedule(50);
    assert_eq!((s.warmup_steps, s.total_steps), (7, 100));
}

#[test]
fn unknown_and_mistyped_keys_are_rejected() {
    assert!(matches!(RunConfig::from_toml("learning_rate = 1.0"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("[optimizer]\nlr = \"fast\""), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("[model.gmoe]\nexperts = 3"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("[optimizer]\nkind = \"sgd\""), Err(Error::Config(_))));
}

#[test]
fn invariants_are_enforced() {
    let ok = RunConfig::default();
    let mut bad = Vec::new();
    let mut c = ok.clone();
    c.optimizer.lr = 0.0;
    bad.push(c);
    let mut c = ok.clone();
    c.optimizer.lr = -1e-3;
    bad.push(c);
    let mut c = ok.clone();
    c.epochs = 0;
    bad.push(c);
    let mut c = ok.clone();
    c.batch_size = 0;
    bad.push(c);
    let mut c = ok.clone();
    c.grad_clip = Some(0.0);
    bad.push(c);
    let mut c = ok.clone();
    c.optimizer.betas = (1.0, 0.999);
    bad.push(c);
    let mut c = ok.clone();
    c.model.gmoe.top_k = 9;
    bad.push(c);
    let mut c = ok.clone();
    c.schedule.warmup_steps = Some(10);
    c.schedule.cosine_total_steps = Some(5);
    bad.push(c);
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
}

#[test]
fn paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("data")).unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "dataset = \"data\"\ncheckpoint_dir = \"out/ck\"\n").unwrap();
    let c = RunConfig::load(&path).unwrap();
    assert_eq!(c.dataset, dir.path().join("data"));
    assert!(c.checkpoint_dir.is_absolute());
    c.check_paths().unwrap();
    assert!(dir.path().join("out/ck").is_dir());

    let missing = RunConfig { dataset: dir.path().join("nope"), ..c };
    assert!(matches!(missing.check_paths(), Err(Error::Config(_))));
}

#[test]
fn load_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "epochs = [").unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert!(err.to_string().contains("broken.toml"), "{err}");
    let err = RunConfig::load(&dir.path().join("absent.toml")).unwrap_err();
    assert!(err.to_string().contains("absent.toml"), "{err}");
}

#[test]
fn hash_covers_settings_but_not_paths() {
    let a = RunConfig::default();
    let h = a.hash();
    assert_eq!(h.len(), 64);
    assert_eq!(h, RunConfig::default().hash());
    let moved = RunConfig { dataset: PathBuf::from("/elsewhere"), checkpoint_dir: PathBuf::from("/tmp/x"), ..a.clone() };
    assert_eq!(moved.hash(), h);
    let mut c = a.clone();
    c.optimizer.lr = 2e-4;
    assert_ne!(c.hash(), h);
    let mut c = a;
    c.model.gmoe.num_experts = 5;
    assert_ne!(c.hash(), h);
}

#[test]
fn derived_schedule_follows_run_length() {
    let c = RunConfig::default();
    let s = c.schedule(250);
    assert_eq!(s.total_steps, 25 * 250);
    assert_eq!(s.warmup_steps, (25.0f64 * 250.0 * 0.05).ceil() as u64);
    let lr_max = c.optimizer.lr;
    assert!((s.lr(0) - lr_max / s.warmup_steps as f64).abs() < 1e-18);
    assert!((s.lr(s.warmup_steps) - lr_max).abs() < 1e-18);
    assert_eq!(s.lr(s.total_steps), 0.0);
    let mut prev = f64::INFINITY;
    for step in s.warmup_steps..=s.total_steps {
        let lr = s.lr(step);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = RunConfig::from_toml(&std::fs::read_to_string(root.join("desk.toml")).unwrap()).unwrap();
    assert_eq!(desk.hash(), RunConfig::default().hash());
    let mut n = 0;
    for entry in std::fs::read_dir(root.join("bench")).unwrap() {
        let path = entry.unwrap().path();
        let c = RunConfig::from_toml(&std::fs::read_to_string(&path).unwrap()).unwrap();
        c.validate().unwrap();
        let stem = path.file_stem().unwrap().to_str().unwrap().to_string();
        assert!(c.checkpoint_dir.ends_with(&stem), "{stem}");
        n += 1;
    }
    assert_eq!(n, 7);
}
