mod common;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smgeo::checkpoint::{Checkpoint, RngState, MAGIC};
use smgeo::config::RunConfig;
use smgeo::dataset::Split;
use smgeo::eval::predict_samples;
use smgeo::train::{Trainer, LAST_CHECKPOINT};
use smgeo::Error;

fn trained(dir: &std::path::Path) -> (RunConfig, Trainer) {
    let ds = common::default_tiny_dataset(&dir.join("data"));
    let cfg = RunConfig { epochs: 1, ..common::tiny_config(&dir.join("data"), &dir.join("ck")) };
    cfg.check_paths().unwrap();
    let mut t = Trainer::with_data(&cfg, ds.load_split(Split::Train).unwrap(), ds.load_split(Split::Val).unwrap(), None).unwrap();
    t.run_epoch().unwrap();
    (cfg, t)
}

#[test]
fn bytes_round_trip_exactly() {
    let (_, ck) = Checkpoint::initial(&RunConfig::default()).unwrap();
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes, "mem".as_ref()).unwrap();
    assert_eq!(back, ck);
}

#[test]
fn saved_checkpoint_predicts_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (_, t) = trained(dir.path());
    let path = dir.path().join("ck").join(LAST_CHECKPOINT);
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, t.ck);
    assert_eq!(loaded.epoch, 1);
    assert_eq!(loaded.step, 2);
    assert_eq!(loaded.optimizer.step, 2);

    let samples = &t.val;
    let a = predict_samples(&t.model, &t.ck.state, samples, 2).unwrap();
    let b = predict_samples(&loaded.model().unwrap(), &loaded.state, samples, 3).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.bbox.to_array().map(f64::to_bits), q.bbox.to_array().map(f64::to_bits));
        assert_eq!(p.heatmap.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.heatmap.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn incompatible_configuration_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, t) = trained(dir.path());
    let ck = Checkpoint::load(&dir.path().join("ck").join(LAST_CHECKPOINT)).unwrap();
    ck.ensure_compatible(&cfg).unwrap();
    let mut other = cfg.clone();
    other.optimizer.lr = 3e-4;
    assert!(matches!(ck.ensure_compatible(&other), Err(Error::Config(_))));
    let err = Trainer::with_data(&other, t.train.clone(), t.val.clone(), Some(ck)).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn corrupt_files_are_rejected_with_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = Checkpoint::initial(&RunConfig::default()).unwrap();
    let good = ck.to_bytes();
    let path = dir.path().join("bad.ckpt");
    let header_len = u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;

    let mut wrong_magic = good.clone();
    wrong_magic[0] ^= 0xff;
    let mut bad_header = good.clone();
    bad_header[16] = b'#';
    let mut extra = good.clone();
    extra.extend_from_slice(&[0; 8]);
    let mut hash_mismatch = good.clone();
    let header = std::str::from_utf8(&good[16..16 + header_len]).unwrap();
    let hash = ck.config.hash();
    let flipped = header.replacen(&hash, &"0".repeat(hash.len()), 1);
    assert_ne!(flipped, header);
    hash_mismatch.splice(16..16 + header_len, flipped.bytes());

    for (name, bytes) in [
        ("magic", wrong_magic),
        ("truncated", good[..good.len() - 8].to_vec()),
        ("short", good[..12].to_vec()),
        ("header", bad_header),
        ("trailing", extra),
        ("hash", hash_mismatch),
    ] {
        std::fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(e @ Error::Format { .. }) => assert!(e.to_string().contains("bad.ckpt"), "{name}: {e}"),
            other => panic!("{name}: expected a format error, got {other:?}"),
        }
    }
    assert!(matches!(Checkpoint::load(&dir.path().join("missing.ckpt")), Err(Error::Io { .. })));
}

#[test]
fn rng_state_resumes_the_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..37 {
        rng.next_u32();
    }
    let state = RngState::capture(&rng);
    let mut resumed = state.restore().unwrap();
    for _ in 0..100 {
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }
    let bad = RngState { word_pos: "x".into(), ..state };
    assert!(bad.restore().is_err());
}
