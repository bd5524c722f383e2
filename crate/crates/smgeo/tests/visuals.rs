mod common;

use std::collections::HashSet;

use smgeo::checkpoint::Checkpoint;
use smgeo::config::RunConfig;
use smgeo::visuals::{export_visuals, heat_color, ActivationDump, EXPERT_PALETTE};
use smgeo::Error;

#[test]
fn exports_overlays_and_expert_maps() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::default_tiny_dataset(&dir.path().join("data"));
    let cfg = RunConfig::default();
    let (_, ck) = Checkpoint::initial(&cfg).unwrap();
    let ids: Vec<String> = ds.records.iter().take(2).map(|r| r.id.clone()).collect();
    let out = dir.path().join("vis");
    let visuals = export_visuals(&ck, &ds, &ids, &out).unwrap();
    assert_eq!(visuals.len(), 2);

    let (rh, rw) = cfg.model.backbone.reference_extent;
    let (qh, qw) = cfg.model.backbone.query_extent;
    let gmoe = &cfg.model.gmoe;
    for v in &visuals {
        for p in [&v.heatmap_png, &v.boxes_png] {
            let img = image::open(p).unwrap();
            assert_eq!((img.height() as usize, img.width() as usize), (rh, rw));
        }

        // The marker sits in the heatmap's argmax cell.
        let pred = &v.prediction;
        let (fh, fw) = pred.feat;
        let best = (0..fh * fw).fold(0, |b, i| if pred.heatmap[i] > pred.heatmap[b] { i } else { b });
        let (sx, sy) = (rw as f64 / fw as f64, rh as f64 / fh as f64);
        let (mx, my) = v.peak_marker;
        assert!((mx / sx).floor() as usize == best % fw && (my / sy).floor() as usize == best / fw);

        let dump: ActivationDump = serde_json::from_str(&std::fs::read_to_string(&v.activations_json).unwrap()).unwrap();
        assert_eq!(dump.sample_id, v.id);
        assert_eq!(dump.layers.len(), v.activation_pngs.len());
        assert!(!dump.layers.is_empty());
        for (layer, png) in dump.layers.iter().zip(&v.activation_pngs) {
            assert!(layer.grid[0] <= gmoe.grid.0 && layer.grid[1] <= gmoe.grid.1);
            assert_eq!(layer.primary.len(), layer.grid[0] * layer.grid[1]);
            assert!(layer.selected.iter().all(|s| s.len() == gmoe.top_k));
            let img = image::open(png).unwrap().to_rgb8();
            let extent = if layer.view == "query" { (qh, qw) } else { (rh, rw) };
            assert_eq!((img.height() as usize, img.width() as usize), extent);
            let colors: HashSet<[u8; 3]> = img.pixels().map(|p| p.0).collect();
            assert!(colors.len() <= gmoe.num_experts);
            assert!(colors.iter().all(|c| EXPERT_PALETTE.iter().any(|p| p.0 == *c)));
            let used: HashSet<usize> = layer.primary.iter().copied().collect();
            assert_eq!(colors.len(), used.len());
        }
    }
}

#[test]
fn unknown_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::default_tiny_dataset(dir.path());
    let (_, ck) = Checkpoint::initial(&RunConfig::default()).unwrap();
    let err = export_visuals(&ck, &ds, &["nope".to_string()], &dir.path().join("vis")).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)), "{err}");
}

#[test]
fn heat_ramp_is_monotone_in_brightness() {
    let lum = |t: f64| heat_color(t).0.iter().map(|&c| c as u32).sum::<u32>();
    let mut prev = 0;
    for i in 0..=20 {
        let l = lum(i as f64 / 20.0);
        assert!(l >= prev);
        prev = l;
    }
    assert_eq!(heat_color(-1.0), heat_color(0.0));
    assert_eq!(heat_color(2.0), heat_color(1.0));
}
