//! Grid-level sparse mixture of experts.
//!
//! A token map is tiled into `g_h × g_w` grids. Each grid is mean-pooled and
//! scored by a linear router; the `top_k` best experts process every token of
//! the grid and their outputs are mixed with the softmax of the selected scores.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Fwd, Linear, Mlp, WeightInit};
use crate::ops::top_k_indices;
use crate::params::{Init, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Which blocks of a stage host a GMoE in place of the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Insertion {
    None,
    Even,
    All,
}

impl Insertion {
    pub fn applies(self, block: usize) -> bool {
        match self {
            Insertion::None => false,
            Insertion::Even => block.is_multiple_of(2),
            Insertion::All => true,
        }
    }
}

/// Distribution whose entropy is regularized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum EntropyMode {
    /// Softmax restricted to the selected experts.
    Renormalized,
    /// Softmax over all expert logits, before truncation.
    FullSoftmax,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct GmoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub grid: (usize, usize),
    /// Expert hidden width as a multiple of the host channel count.
    pub hidden_ratio: f64,
    pub insertion: [Insertion; 4],
    pub entropy_mode: EntropyMode,
    /// Initialize every expert with the same weights (test mode).
    pub identical_experts: bool,
}

impl Default for GmoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 6,
            top_k: 2,
            grid: (4, 4),
            hidden_ratio: 2.0,
            insertion: [Insertion::None, Insertion::Even, Insertion::Even, Insertion::Even],
            entropy_mode: EntropyMode::Renormalized,
            identical_experts: false,
        }
    }
}

impl GmoeConfig {
    /// Same settings with no GMoE anywhere (plain MLP blocks).
    pub fn disabled(&self) -> Self {
        Self {
            insertion: [Insertion::None; 4],
            ..self.clone()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.insertion.iter().any(|i| *i != Insertion::None)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "need 1 <= top_k <= num_experts, got top_k={} num_experts={}",
                self.top_k, self.num_experts
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::Config("grid extents must be >= 1".into()));
        }
        if !(self.hidden_ratio > 0.0) {
            return Err(Error::Config("expert hidden ratio must be > 0".into()));
        }
        Ok(())
    }
}

/// Splits a `[Hs, Ws, c]` map into `g_h·g_w` row-major tiles.
///
/// Extents that the grid does not divide are zero-padded on the right/bottom.
pub fn grid_partition(map: &Tensor, grid: (usize, usize)) -> Result<Vec<Tensor>> {
    let (hs, ws, c) = map_dims(map)?;
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || gh > hs || gw > ws {
        return Err(Error::Config(format!("grid {gh}x{gw} does not fit a {hs}x{ws} map")));
    }
    let (th, tw) = (hs.div_ceil(gh), ws.div_ceil(gw));
    let d = map.data();
    let mut tiles = Vec::with_capacity(gh * gw);
    for ty in 0..gh {
        for tx in 0..gw {
            let mut t = vec![0.0; th * tw * c];
            for y in 0..th {
                for x in 0..tw {
                    let (sy, sx) = (ty * th + y, tx * tw + x);
                    if sy < hs && sx < ws {
                        let src = (sy * ws + sx) * c;
                        t[(y * tw + x) * c..(y * tw + x + 1) * c].copy_from_slice(&d[src..src + c]);
                    }
                }
            }
            tiles.push(Tensor::new(&[th, tw, c], t)?);
        }
    }
    Ok(tiles)
}

/// Inverse of [`grid_partition`], cropping any padding.
pub fn grid_unpartition(tiles: &[Tensor], grid: (usize, usize), hs: usize, ws: usize) -> Result<Tensor> {
    let (gh, gw) = grid;
    if tiles.len() != gh * gw || tiles.is_empty() {
        return Err(Error::Shape(format!("expected {} tiles, got {}", gh * gw, tiles.len())));
    }
    let (th, tw, c) = map_dims(&tiles[0])?;
    if th * gh < hs || tw * gw < ws {
        return Err(Error::Shape(format!("tiles of {th}x{tw} cannot cover {hs}x{ws}")));
    }
    let mut out = vec![0.0; hs * ws * c];
    for (i, t) in tiles.iter().enumerate() {
        if t.shape() != [th, tw, c] {
            return Err(Error::Shape(format!("tile {i} has shape {:?}", t.shape())));
        }
        let (ty, tx) = (i / gw, i % gw);
        for y in 0..th {
            for x in 0..tw {
                let (sy, sx) = (ty * th + y, tx * tw + x);
                if sy < hs && sx < ws {
                    let dst = (sy * ws + sx) * c;
                    out[dst..dst + c].copy_from_slice(&t.data()[(y * tw + x) * c..(y * tw + x + 1) * c]);
                }
            }
        }
    }
    Tensor::new(&[hs, ws, c], out)
}

fn map_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::Shape(format!("expected an [H, W, C] map, got {s:?}"))),
    }
}

/// Token indices (row-major within one map) of each grid tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLayout {
    pub grid: (usize, usize),
    pub tiles: Vec<Vec<usize>>,
}

impl GridLayout {
    /// Tiling of an `h × w` map; the grid must divide both extents.
    pub fn new(h: usize, w: usize, grid: (usize, usize)) -> Result<Self> {
        let (gh, gw) = grid;
        if gh == 0 || gw == 0 || gh > h || gw > w {
            return Err(Error::Config(format!("grid {gh}x{gw} does not fit a {h}x{w} map")));
        }
        if !h.is_multiple_of(gh) || !w.is_multiple_of(gw) {
            return Err(Error::Config(format!("grid {gh}x{gw} does not divide a {h}x{w} map")));
        }
        let (th, tw) = (h / gh, w / gw);
        let tiles = (0..gh * gw)
            .map(|t| {
                let (ty, tx) = (t / gw, t % gw);
                (0..th)
                    .flat_map(|y| (0..tw).map(move |x| (ty * th + y) * w + tx * tw + x))
                    .collect()
            })
            .collect();
        Ok(Self { grid, tiles })
    }

    /// Grid actually used on an `h × w` map: the configured grid clamped to the map.
    pub fn effective_grid(h: usize, w: usize, grid: (usize, usize)) -> (usize, usize) {
        (grid.0.min(h), grid.1.min(w))
    }
}

/// Selected experts (descending score, ties to the lowest id) and their
/// softmax weights over the selected set.
pub fn topk_renormalize(logits: &[f64], top_k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if top_k == 0 || top_k > logits.len() {
        return Err(Error::Config(format!("top_k must be in 1..={}, got {top_k}", logits.len())));
    }
    let ids = top_k_indices(logits, top_k);
    let max = logits[ids[0]];
    let exps: Vec<f64> = ids.iter().map(|&i| libm::exp(logits[i] - max)).collect();
    let z: f64 = exps.iter().sum();
    Ok((ids, exps.into_iter().map(|e| e / z).collect()))
}

/// Shannon entropy (nats) with `0·ln 0 = 0`.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * libm::log(w))
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum View {
    Query,
    Reference,
}

/// Routing outcome of one GMoE layer over `grids` tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingDecision {
    pub num_experts: usize,
    pub top_k: usize,
    /// Raw router logits, `[grids × num_experts]`.
    pub logits: Vec<f64>,
    /// Selected expert ids, `[grids × top_k]`, highest weight first.
    pub selected: Vec<usize>,
    /// Renormalized weights aligned with `selected`.
    pub weights: Vec<f64>,
    /// Entropy of each grid's renormalized weights.
    pub entropy: Vec<f64>,
}

impl GatingDecision {
    pub fn from_logits(logits: Vec<f64>, num_experts: usize, top_k: usize) -> Result<Self> {
        if num_experts == 0 || !logits.len().is_multiple_of(num_experts) {
            return Err(Error::Shape(format!("{} logits for {num_experts} experts", logits.len())));
        }
        let mut selected = Vec::new();
        let mut weights = Vec::new();
        let mut ent = Vec::new();
        for row in logits.chunks(num_experts) {
            let (ids, w) = topk_renormalize(row, top_k)?;
            ent.push(entropy(&w));
            selected.extend(ids);
            weights.extend(w);
        }
        Ok(Self { num_experts, top_k, logits, selected, weights, entropy: ent })
    }

    pub fn grids(&self) -> usize {
        self.logits.len() / self.num_experts.max(1)
    }

    /// Highest-weight expert of every grid.
    pub fn primary_experts(&self) -> Vec<usize> {
        self.selected.chunks(self.top_k).map(|s| s[0]).collect()
    }

    /// Dense `[grids × num_experts]` weights with zeros for unselected experts.
    pub fn dense_weights(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.logits.len()];
        for (g, (ids, ws)) in self.selected.chunks(self.top_k).zip(self.weights.chunks(self.top_k)).enumerate() {
            for (&i, &w) in ids.iter().zip(ws) {
                d[g * self.num_experts + i] = w;
            }
        }
        d
    }

    /// Softmax over all logits of every grid (pre-truncation distribution).
    pub fn full_softmax(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.logits.len());
        for row in self.logits.chunks(self.num_experts) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| libm::exp(v - max)).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|v| v / z));
        }
        out
    }
}

/// Mean entropy over every grid of every decision.
pub fn gating_entropy<'a>(decisions: impl IntoIterator<Item = &'a GatingDecision>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for d in decisions {
        sum += d.entropy.iter().sum::<f64>();
        n += d.entropy.len();
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("gating entropy over zero grids".into()));
    }
    Ok(sum / n as f64)
}

/// Number of selections each expert received.
pub fn expert_usage<'a>(decisions: impl IntoIterator<Item = &'a GatingDecision>, num_experts: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_experts];
    for d in decisions {
        for &e in &d.selected {
            counts[e] += 1;
        }
    }
    counts
}

/// Routing decision of one layer, labelled by where it ran.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRouting {
    pub view: View,
    pub stage: usize,
    pub block: usize,
    pub decision: GatingDecision,
}

/// One GMoE evaluation recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct GateRecord {
    pub view: View,
    pub stage: usize,
    pub block: usize,
    pub batch: usize,
    pub grid: (usize, usize),
    pub decision: GatingDecision,
    /// Dense renormalized weights on the tape, `[batch·grids × num_experts]`.
    pub weights: Var,
    /// Router logits on the tape.
    pub logits: Var,
    /// Expert multiply-adds spent by this evaluation.
    pub expert_macs: usize,
}

impl GateRecord {
    pub fn routing(&self) -> LayerRouting {
        LayerRouting { view: self.view, stage: self.stage, block: self.block, decision: self.decision.clone() }
    }
}

/// Per-grid primary-expert ids of one sample at one GMoE layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationMap {
    pub view: View,
    pub stage: usize,
    pub block: usize,
    pub sample: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major, `grid_h·grid_w` entries.
    pub expert_ids: Vec<usize>,
}

/// Primary-expert maps for every sample of every logged layer.
pub fn export_activation_maps(log: Option<&[GateRecord]>) -> Result<Vec<ActivationMap>> {
    let records = log.ok_or_else(|| Error::Absent("activation logging was disabled for this pass".into()))?;
    let mut maps = Vec::new();
    for r in records {
        let per = r.grid.0 * r.grid.1;
        let primary = r.decision.primary_experts();
        for s in 0..r.batch {
            maps.push(ActivationMap {
                view: r.view,
                stage: r.stage,
                block: r.block,
                sample: s,
                grid_h: r.grid.0,
                grid_w: r.grid.1,
                expert_ids: primary[s * per..(s + 1) * per].to_vec(),
            });
        }
    }
    Ok(maps)
}

/// Router plus experts replacing the MLP of a transformer block.
#[derive(Debug, Clone)]
pub struct GmoeLayer {
    pub router: Linear,
    pub experts: Vec<Mlp>,
    pub top_k: usize,
    pub grid: (usize, usize),
}

impl GmoeLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, dim: usize, cfg: &GmoeConfig) -> Self {
        let hidden = libm::round((dim as f64) * cfg.hidden_ratio).max(1.0) as usize;
        let router = Linear::new(store, init, &format!("{name}.router"), dim, cfg.num_experts, true, WeightInit::TruncNormal);
        let mut experts: Vec<Mlp> = Vec::with_capacity(cfg.num_experts);
        for e in 0..cfg.num_experts {
            let mlp = Mlp::new(store, init, &format!("{name}.experts.{e}"), dim, hidden);
            if cfg.identical_experts && e > 0 {
                let first = &experts[0];
                for (dst, src) in [
                    (mlp.fc1.w, first.fc1.w),
                    (mlp.fc2.w, first.fc2.w),
                    (mlp.fc1.b.unwrap(), first.fc1.b.unwrap()),
                    (mlp.fc2.b.unwrap(), first.fc2.b.unwrap()),
                ] {
                    let t = store.get(src).clone();
                    *store.get_mut(dst) = t;
                }
            }
            experts.push(mlp);
        }
        Self { router, experts, top_k: cfg.top_k, grid: cfg.grid }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Router logits `[num_experts]` of one tile given as `[tokens, C]`.
    pub fn gate_scores(&self, f: &mut Fwd<'_>, tile: Var) -> Result<Var> {
        let shape = f.tape.shape(tile).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Shape(format!("tile must be a non-empty [tokens, C] matrix, got {shape:?}")));
        }
        let pooled = f.tape.mean_axis(tile, 0)?;
        let pooled = f.tape.reshape(pooled, &[1, shape[1]])?;
        let logits = self.router.forward(f, pooled)?;
        f.tape.reshape(logits, &[self.num_experts()])
    }

    /// Sparse mixture over `x: [batch·h·w, C]` (row-major maps); returns the
    /// mixed expert output (no residual) and the routing record.
    pub fn forward(
        &self,
        f: &mut Fwd<'_>,
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
        place: (View, usize, usize),
    ) -> Result<(Var, GateRecord)> {
        let grid = GridLayout::effective_grid(h, w, self.grid);
        let layout = GridLayout::new(h, w, grid)?;
        let per_map = h * w;
        let e_count = self.num_experts();
        let segments: Vec<Vec<usize>> = (0..batch)
            .flat_map(|b| layout.tiles.iter().map(move |t| t.iter().map(|&i| b * per_map + i).collect()))
            .collect();
        let pooled = f.tape.segment_mean(x, segments.clone())?;
        let logits = self.router.forward(f, pooled)?;
        let (weights, selected) = f.tape.topk_softmax(logits, self.top_k)?;
        let flat_w = f.tape.reshape(weights, &[segments.len() * e_count])?;

        let mut out: Option<Var> = None;
        let mut expert_macs = 0;
        for (e, expert) in self.experts.iter().enumerate() {
            let mut rows = Vec::new();
            let mut wrows = Vec::new();
            for (t, seg) in segments.iter().enumerate() {
                if selected[t * self.top_k..(t + 1) * self.top_k].contains(&e) {
                    rows.extend_from_slice(seg);
                    wrows.extend(std::iter::repeat_n(Some(t * e_count + e), seg.len()));
                }
            }
            if rows.is_empty() {
                continue;
            }
            expert_macs += rows.len() * expert.macs_per_token();
            let xe = f.tape.gather_rows(x, rows.iter().map(|&r| Some(r)).collect())?;
            let he = expert.forward(f, xe)?;
            let we = f.tape.gather_rows(flat_w, wrows)?;
            let ye = f.tape.scale_rows(he, we)?;
            let scattered = f.tape.scatter_add_rows(ye, rows, batch * per_map)?;
            out = Some(match out {
                Some(o) => f.tape.add(o, scattered)?,
                None => scattered,
            });
        }
        let out = out.ok_or_else(|| Error::Internal("no expert was selected".into()))?;
        let decision = GatingDecision::from_logits(f.tape.data(logits).to_vec(), e_count, self.top_k)?;
        if decision.selected != selected {
            return Err(Error::Internal("router selection diverged from its record".into()));
        }
        let record = GateRecord {
            view: place.0,
            stage: place.1,
            block: place.2,
            batch,
            grid,
            decision,
            weights,
            logits,
            expert_macs,
        };
        Ok((out, record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_hand_cases() {
        let (ids, w) = topk_renormalize(&[2.0, 1.0, 0.0], 2).unwrap();
        assert_eq!(ids, vec![0, 1]);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);

        let (ids, w) = topk_renormalize(&[0.5, 0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(ids, vec![0, 1]);
        assert_eq!(w, vec![0.5, 0.5]);

        let logits = [0.3, -1.0, 2.0];
        let (ids, w) = topk_renormalize(&logits, 3).unwrap();
        let z: f64 = logits.iter().map(|v| libm::exp(*v)).sum();
        for (i, wi) in ids.iter().zip(&w) {
            assert!((wi - libm::exp(logits[*i]) / z).abs() < 1e-15);
        }
        assert!(topk_renormalize(&logits, 4).is_err());
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[1.0 / 6.0; 6]) - libm::log(6.0)).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert!((entropy(&[0.7311, 0.2689]) - 0.5822).abs() < 1e-3);
    }

    #[test]
    fn grid_partition_shapes() {
        let map = Tensor::from_fn(&[8, 8, 3], |i| i as f64);
        let tiles = grid_partition(&map, (2, 2)).unwrap();
        assert_eq!(tiles.len(), 4);
        assert!(tiles.iter().all(|t| t.shape() == [4, 4, 3]));
        let whole = grid_partition(&map, (1, 1)).unwrap();
        assert_eq!(whole[0], map);
        assert!(matches!(grid_partition(&map, (9, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn grid_layout_matches_partition() {
        let map = Tensor::from_fn(&[4, 6, 1], |i| i as f64);
        let tiles = grid_partition(&map, (2, 3)).unwrap();
        let layout = GridLayout::new(4, 6, (2, 3)).unwrap();
        for (t, idx) in tiles.iter().zip(&layout.tiles) {
            let vals: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
            assert_eq!(t.data(), vals.as_slice());
        }
    }

    #[test]
    fn insertion_plan() {
        assert!(Insertion::Even.applies(0) && !Insertion::Even.applies(1) && Insertion::Even.applies(4));
        assert!(Insertion::All.applies(3));
        assert!(!Insertion::None.applies(0));
    }
}
