mod common;

use common::{build, check_with_params, eval, randomize};
use smgeo_core::backbone::{
    window_geometry, BackboneConfig, BlockPlace, Ffn, PatchEmbed, PatchMerging, SwinBlock, SwinEncoder, TokenMap,
    WindowAttention, WindowLayout,
};
use smgeo_core::gmoe::{GmoeConfig, Insertion, View};
use smgeo_core::gradcheck::{project, random_tensor};
use smgeo_core::nn::Fwd;
use smgeo_core::params::ParamStore;
use smgeo_core::{Error, Tape, Tensor};

const TOL: f64 = 1e-4;

fn place() -> BlockPlace {
    BlockPlace { view: View::Reference, stage: 0, block: 0 }
}

fn linear_apply(store: &ParamStore, lin: &smgeo_core::nn::Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(lin.w);
    let (i, o) = (lin.in_dim, lin.out_dim);
    let mut out: Vec<f64> = match lin.b {
        Some(b) => store.get(b).data().to_vec(),
        None => vec![0.0; o],
    };
    for (k, xk) in x.iter().enumerate().take(i) {
        for (j, oj) in out.iter_mut().enumerate() {
            *oj += xk * w.data()[k * o + j];
        }
    }
    out
}

/// Full attention over the map where a pair is allowed only when both tokens
/// fall in the same shifted window, computed in original map coordinates.
#[allow(clippy::needless_range_loop)]
fn brute_force_attention(store: &ParamStore, attn: &WindowAttention, x: &Tensor, h: usize, w: usize, shifted: bool) -> Vec<f64> {
    let c = attn.dim;
    let (m, s) = window_geometry(h, w, attn.table_window, shifted);
    let big = attn.table_window as i64;
    let heads = attn.heads;
    let dh = c / heads;
    let table = store.get(attn.bias_table);
    let group = |p: usize| (p as i64 - s as i64).div_euclid(m as i64);
    let rows: Vec<&[f64]> = x.data().chunks(c).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| linear_apply(store, &attn.q, r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| linear_apply(store, &attn.k, r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| linear_apply(store, &attn.v, r)).collect();
    let mut out = Vec::new();
    for i in 0..h * w {
        let (yi, xi) = (i / w, i % w);
        let mut concat = vec![0.0; c];
        for hd in 0..heads {
            let mut logits = Vec::new();
            for j in 0..h * w {
                let (yj, xj) = (j / w, j % w);
                if group(yi) != group(yj) || group(xi) != group(xj) {
                    continue;
                }
                let dot: f64 = (0..dh).map(|d| q[i][hd * dh + d] * k[j][hd * dh + d]).sum::<f64>() / (dh as f64).sqrt();
                let dy = yi as i64 - yj as i64 + big - 1;
                let dx = xi as i64 - xj as i64 + big - 1;
                let b = table.data()[((dy * (2 * big - 1) + dx) as usize) * heads + hd];
                logits.push((j, dot + b));
            }
            let mx = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l.1 - mx).exp()).sum();
            for &(j, l) in &logits {
                let p = (l - mx).exp() / z;
                for d in 0..dh {
                    concat[hd * dh + d] += p * v[j][hd * dh + d];
                }
            }
        }
        out.extend(linear_apply(store, &attn.proj, &concat));
    }
    out
}

fn attention_module(dim: usize, heads: usize, window: usize, seed: u64) -> (ParamStore, WindowAttention) {
    let (mut store, attn) = build(seed, |s, i| WindowAttention::new(s, i, "attn", dim, heads, window).unwrap());
    randomize(&mut store, 0.5, seed * 100);
    (store, attn)
}

fn map_output(store: &ParamStore, attn: &WindowAttention, x: &Tensor, h: usize, w: usize, shifted: bool) -> Tensor {
    eval(store, |f| {
        let v = f.tape.constant(x.clone());
        let c = x.shape()[1];
        attn.forward_map(f, TokenMap { var: v, batch: 1, h, w, c }, shifted)
    })
}

#[test]
fn windowed_attention_matches_brute_force() {
    for &(h, w, m, shifted) in &[
        (4, 4, 2, false),
        (4, 4, 2, true),
        (8, 8, 4, false),
        (8, 8, 4, true),
        (6, 6, 4, true),
        (5, 7, 2, true),
        (3, 3, 2, false),
    ] {
        let (store, attn) = attention_module(4, 2, m, 7);
        let x = random_tensor(&[h * w, 4], -1.0, 1.0, 11);
        let got = map_output(&store, &attn, &x, h, w, shifted);
        let want = brute_force_attention(&store, &attn, &x, h, w, shifted);
        let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{h}x{w} M={m} shifted={shifted}: max err {err}");
    }
}

#[test]
fn shifted_mask_zeroes_cross_window_pairs() {
    let (store, attn) = attention_module(4, 2, 2, 3);
    let (h, w) = (4, 4);
    let layout = WindowLayout::new(1, h, w, 2, true).unwrap();
    let x = random_tensor(&[h * w, 4], -1.0, 1.0, 5);
    let probs = eval(&store, |f| {
        let v = f.tape.constant(x.clone());
        let win = f.tape.gather_rows(v, layout.gather.clone())?;
        Ok(attn.attend(f, win, layout.window, layout.mask.as_ref())?.1)
    });
    let n = 4;
    let group = |p: usize| (p as i64 - 1).div_euclid(2);
    for (wi, slots) in layout.gather.chunks(n).enumerate() {
        for hd in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    let (a, b) = (slots[i].unwrap(), slots[j].unwrap());
                    let same = group(a / w) == group(b / w) && group(a % w) == group(b % w);
                    let p = probs.data()[((wi * 2 + hd) * n + i) * n + j];
                    if same {
                        assert!(p > 0.0);
                    } else {
                        assert_eq!(p, 0.0, "window {wi} pair ({a},{b})");
                    }
                }
            }
        }
    }
}

#[test]
fn single_token_window_is_value_projection() {
    let (store, attn) = attention_module(4, 2, 1, 9);
    let x = random_tensor(&[3, 4], -1.0, 1.0, 1);
    let got = eval(&store, |f| {
        let v = f.tape.constant(x.clone());
        attn.forward_windows(f, v, 1, None)
    });
    for (r, row) in x.data().chunks(4).enumerate() {
        let want = linear_apply(&store, &attn.proj, &linear_apply(&store, &attn.v, row));
        for (a, b) in got.data()[r * 4..(r + 1) * 4].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_tokens_attend_uniformly() {
    let (mut store, attn) = attention_module(4, 2, 2, 4);
    *store.get_mut(attn.bias_table) = Tensor::zeros(store.get(attn.bias_table).shape());
    let row = [0.3, -0.7, 1.1, 0.2];
    let x = Tensor::from_fn(&[8, 4], |i| row[i % 4]);
    let probs = eval(&store, |f| {
        let v = f.tape.constant(x.clone());
        Ok(attn.attend(f, v, 2, None)?.1)
    });
    assert!(probs.data().iter().all(|p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn heads_must_divide_channels() {
    let mut store = ParamStore::new();
    let mut r = common::rng(0);
    let mut init = smgeo_core::params::Init { rng: &mut r };
    let err = WindowAttention::new(&mut store, &mut init, "a", 6, 4, 2).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn attention_gradient_on_two_by_two_window() {
    let (store, attn) = attention_module(4, 2, 2, 21);
    let x = random_tensor(&[4, 4], -1.0, 1.0, 2);
    let r = check_with_params(&store, &[x], usize::MAX, |f, v| {
        let y = attn.forward_windows(f, v[0], 2, None)?;
        project(f.tape, y, 3)
    });
    assert!(r.max_rel_err < TOL, "{r:?}");
}

fn block(dim: usize, heads: usize, window: usize, shifted: bool, moe: Option<&GmoeConfig>, seed: u64) -> (ParamStore, SwinBlock) {
    build(seed, |s, i| SwinBlock::new(s, i, "blk", dim, heads, window, 2 * dim, shifted, moe).unwrap())
}

fn run_block(store: &ParamStore, blk: &SwinBlock, x: &Tensor, batch: usize, h: usize, w: usize) -> Tensor {
    eval(store, |f| {
        let v = f.tape.constant(x.clone());
        let c = x.shape()[1];
        let mut gates = Vec::new();
        Ok(blk.forward(f, TokenMap { var: v, batch, h, w, c }, place(), &mut gates)?.var)
    })
}

#[test]
fn zeroed_output_projections_make_block_identity() {
    let moe = GmoeConfig { num_experts: 3, grid: (2, 2), ..GmoeConfig::default() };
    for cfg in [None, Some(&moe)] {
        let (mut store, blk) = block(8, 2, 2, true, cfg, 5);
        randomize(&mut store, 0.5, 17);
        let mut zero = vec![blk.attn.proj.w, blk.attn.proj.b.unwrap()];
        match &blk.ffn {
            Ffn::Mlp(m) => zero.extend([m.fc2.w, m.fc2.b.unwrap()]),
            Ffn::Moe(m) => {
                for e in &m.experts {
                    zero.extend([e.fc2.w, e.fc2.b.unwrap()]);
                }
            }
        }
        for id in zero {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let x = random_tensor(&[2 * 16, 8], -2.0, 2.0, 8);
        let y = run_block(&store, &blk, &x, 2, 4, 4);
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }
}

#[test]
fn permuting_windows_permutes_outputs() {
    let (mut store, blk) = block(4, 2, 2, false, None, 6);
    randomize(&mut store, 0.5, 3);
    let (h, w, m) = (4, 4, 2);
    let x = random_tensor(&[h * w, 4], -1.0, 1.0, 4);
    let perm = [3usize, 0, 2, 1];
    let relocate = |t: &Tensor| {
        Tensor::from_fn(&[h * w, 4], |i| {
            let (row, ch) = (i / 4, i % 4);
            let (y, xx) = (row / w, row % w);
            let src_win = perm[(y / m) * 2 + xx / m];
            let (sy, sx) = ((src_win / 2) * m + y % m, (src_win % 2) * m + xx % m);
            t.data()[(sy * w + sx) * 4 + ch]
        })
    };
    let y = run_block(&store, &blk, &x, 1, h, w);
    let y_perm = run_block(&store, &blk, &relocate(&x), 1, h, w);
    assert!(y_perm.max_abs_diff(&relocate(&y)).unwrap() < 1e-13);
}

#[test]
fn block_gradients() {
    let moe = GmoeConfig { num_experts: 3, top_k: 2, grid: (2, 2), ..GmoeConfig::default() };
    for (shifted, cfg) in [(false, None), (true, None), (true, Some(&moe))] {
        let (mut store, blk) = block(4, 2, 2, shifted, cfg, 12);
        randomize(&mut store, 0.5, 40);
        let x = random_tensor(&[16, 4], -1.0, 1.0, 41);
        let r = check_with_params(&store, &[x], 6, |f, v| {
            let mut gates = Vec::new();
            let y = blk.forward(f, TokenMap { var: v[0], batch: 1, h: 4, w: 4, c: 4 }, place(), &mut gates)?;
            project(f.tape, y.var, 42)
        });
        assert!(r.max_rel_err < TOL, "shifted={shifted} moe={}: {r:?}", cfg.is_some());
    }
}

#[test]
fn patch_merging_shapes_and_errors() {
    let (store, pm) = build(1, |s, i| PatchMerging::new(s, i, "pm", 3));
    let x = random_tensor(&[4, 3], -1.0, 1.0, 1);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let mut f = Fwd { tape: &mut tape, bind: &bind };
    let v = f.tape.constant(x);
    let y = pm.forward(&mut f, TokenMap { var: v, batch: 1, h: 2, w: 2, c: 3 }).unwrap();
    assert_eq!((y.h, y.w, y.c), (1, 1, 6));
    assert_eq!(f.tape.shape(y.var), &[1, 6]);

    let odd = f.tape.constant(Tensor::zeros(&[6, 3]));
    let err = pm.forward(&mut f, TokenMap { var: odd, batch: 1, h: 3, w: 2, c: 3 }).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn patch_merging_neighbourhood_order() {
    // Concatenation order is (2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1) with
    // (row, col) indexing; output channel 0 reads slot 1, channel 1 reads slot 2.
    let (mut store, pm) = build(1, |s, i| PatchMerging::new(s, i, "pm", 1));
    *store.get_mut(pm.reduction.w) = Tensor::new(&[4, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let x = Tensor::new(&[4, 1], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
    let y = eval(&store, |f| {
        let v = f.tape.constant(x.clone());
        Ok(pm.forward(f, TokenMap { var: v, batch: 1, h: 2, w: 2, c: 1 })?.var)
    });
    let std = (125.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] - (30.0 - 25.0) / std).abs() < 1e-12);
    assert!((y.data()[1] - (20.0 - 25.0) / std).abs() < 1e-12);
}

#[test]
fn patch_merging_full_scale_shape() {
    let (store, pm) = build(2, |s, i| PatchMerging::new(s, i, "pm", 96));
    let y = eval(&store, |f| {
        let v = f.tape.constant(Tensor::from_fn(&[256 * 256, 96], |i| ((i * 7919) % 97) as f64 / 97.0));
        let m = pm.forward(f, TokenMap { var: v, batch: 1, h: 256, w: 256, c: 96 })?;
        assert_eq!((m.h, m.w, m.c), (128, 128, 192));
        Ok(m.var)
    });
    assert_eq!(y.shape(), &[128 * 128, 192]);
}

#[test]
fn patch_merging_gradient() {
    let (mut store, pm) = build(3, |s, i| PatchMerging::new(s, i, "pm", 2));
    randomize(&mut store, 0.5, 9);
    let x = random_tensor(&[16, 2], -1.0, 1.0, 10);
    let r = check_with_params(&store, &[x], usize::MAX, |f, v| {
        let y = pm.forward(f, TokenMap { var: v[0], batch: 1, h: 4, w: 4, c: 2 })?;
        project(f.tape, y.var, 11)
    });
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn patch_embed_shapes_and_zero_image() {
    let (mut store, pe) = build(4, |s, i| PatchEmbed::new(s, i, "pe", 3, 16, 4));
    let img = random_tensor(&[1, 3, 64, 64], 0.0, 1.0, 2);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let mut f = Fwd { tape: &mut tape, bind: &bind };
    let v = f.tape.constant(img);
    let m = pe.forward(&mut f, v).unwrap();
    assert_eq!((m.h, m.w, m.c), (16, 16, 16));
    let bad = f.tape.constant(Tensor::zeros(&[1, 3, 30, 32]));
    assert!(matches!(pe.forward(&mut f, bad), Err(Error::Shape(_))));

    // A zero image yields the normalized conv bias at every token; with a zero
    // bias that is exactly the LayerNorm shift.
    let beta = random_tensor(&[16], -1.0, 1.0, 6);
    *store.get_mut(pe.norm.beta) = beta.clone();
    let zero = Tensor::zeros(&[1, 3, 8, 8]);
    let y = eval(&store, |f| {
        let v = f.tape.constant(zero.clone());
        Ok(pe.forward(f, v)?.var)
    });
    let first = &y.data()[..16];
    assert!(y.data().chunks(16).all(|r| r == first));
    *store.get_mut(pe.conv.b.unwrap()) = Tensor::zeros(&[16]);
    let y = eval(&store, |f| {
        let v = f.tape.constant(zero.clone());
        Ok(pe.forward(f, v)?.var)
    });
    assert!(y.data().chunks(16).all(|r| r == beta.data()));
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        embed_dim: 4,
        num_heads: [1, 1, 2, 2],
        window_size: 2,
        query_extent: (32, 32),
        reference_extent: (32, 32),
        ..BackboneConfig::desk()
    }
}

#[test]
fn shared_weights_give_identical_features_for_identical_views() {
    let cfg = tiny_backbone();
    let (store, enc) = build(8, |s, i| SwinEncoder::new(s, i, &cfg, &GmoeConfig::default()).unwrap());
    assert!(store.iter().all(|(_, n, _)| !n.contains("query") && !n.contains("reference")));
    let img = random_tensor(&[1, 3, 32, 32], 0.0, 1.0, 3);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let mut f = Fwd { tape: &mut tape, bind: &bind };
    let q = f.tape.constant(img.clone());
    let r = f.tape.constant(img);
    let mut gates = Vec::new();
    let (fq, fr) = enc.encode_pair(&mut f, q, r, &mut gates).unwrap();
    for (a, b) in fq.stages.iter().zip(&fr.stages) {
        assert_eq!(f.tape.data(a.var), f.tape.data(b.var));
    }
    let per_view = gates.len() / 2;
    assert!(per_view > 0);
    for (a, b) in gates[..per_view].iter().zip(&gates[per_view..]) {
        assert_eq!(a.decision, b.decision);
        assert_eq!((a.view, b.view), (View::Query, View::Reference));
    }
}

#[test]
fn desk_encoder_real_forward_shapes() {
    let cfg = BackboneConfig::desk();
    let (store, enc) = build(1, |s, i| SwinEncoder::new(s, i, &cfg, &GmoeConfig::default()).unwrap());
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let mut f = Fwd { tape: &mut tape, bind: &bind };
    let q = f.tape.constant(random_tensor(&[1, 3, 64, 64], 0.0, 1.0, 1));
    let r = f.tape.constant(random_tensor(&[1, 3, 128, 128], 0.0, 1.0, 2));
    let mut gates = Vec::new();
    let (fq, fr) = enc.encode_pair(&mut f, q, r, &mut gates).unwrap();
    let dims = |s: &smgeo_core::backbone::StageFeatures| s.stages.iter().map(|m| (m.h, m.w, m.c)).collect::<Vec<_>>();
    assert_eq!(dims(&fr), vec![(32, 32, 16), (16, 16, 32), (8, 8, 64), (4, 4, 128)]);
    assert_eq!(dims(&fq), vec![(16, 16, 16), (8, 8, 32), (4, 4, 64), (2, 2, 128)]);
    for m in fr.stages.iter().chain(&fq.stages) {
        assert_eq!(f.tape.shape(m.var), &[m.h * m.w, m.c]);
    }
    // Blocks 0 of stages 1..3 and block 2 of stage 2, for each view.
    assert_eq!(gates.len(), 2 * 4);
    let ref_grids: Vec<_> = gates.iter().filter(|g| g.view == View::Reference).map(|g| (g.stage, g.grid)).collect();
    assert_eq!(ref_grids, vec![(1, (4, 4)), (2, (4, 4)), (2, (4, 4)), (3, (4, 4))]);
    let q_grids: Vec<_> = gates.iter().filter(|g| g.view == View::Query).map(|g| g.grid).collect();
    assert_eq!(q_grids, vec![(4, 4), (4, 4), (4, 4), (2, 2)]);
}

#[test]
fn disabled_gmoe_has_no_routers() {
    let cfg = tiny_backbone();
    let moe = GmoeConfig::default().disabled();
    assert_eq!(moe.insertion, [Insertion::None; 4]);
    let (store, _) = build(1, |s, i| SwinEncoder::new(s, i, &cfg, &moe).unwrap());
    assert!(store.iter().all(|(_, n, _)| !n.contains("router")));
}

#[test]
fn config_validation() {
    let mut cfg = BackboneConfig::desk();
    cfg.num_heads[2] = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = BackboneConfig::desk();
    cfg.reference_extent = (130, 128);
    assert!(matches!(cfg.validate(), Err(Error::Shape(_))));
    assert!(BackboneConfig::full().validate().is_ok());
}
