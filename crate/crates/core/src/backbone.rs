//! Hierarchical shifted-window transformer shared by the query and reference views.
//!
//! Token maps travel as `[B·H·W, C]` matrices in row-major map order. Windowed
//! attention gathers them into window order, attends within each window, and
//! gathers them back.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gmoe::{GateRecord, GmoeConfig, GmoeLayer, View};
use crate::nn::{Conv2d, Fwd, LayerNorm, Linear, Mlp, WeightInit};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Additive logit for masked attention pairs; `exp` of it underflows to exactly 0.
pub const MASK_VALUE: f64 = -1e9;

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct BackboneConfig {
    pub in_chans: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub window_size: usize,
    pub mlp_ratio: f64,
    /// Query image extent `(H, W)`.
    pub query_extent: (usize, usize),
    /// Reference image extent `(H, W)`.
    pub reference_extent: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Small CPU-trainable configuration.
    pub fn desk() -> Self {
        Self {
            in_chans: 3,
            patch_size: 4,
            embed_dim: 16,
            depths: [2, 2, 4, 2],
            num_heads: [1, 2, 4, 4],
            window_size: 4,
            mlp_ratio: 2.0,
            query_extent: (64, 64),
            reference_extent: (128, 128),
        }
    }

    /// Full-size Swin-T style configuration (shape computations only at this scale).
    pub fn full() -> Self {
        Self {
            in_chans: 3,
            patch_size: 4,
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            num_heads: [3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4.0,
            query_extent: (1024, 1024),
            reference_extent: (1024, 1024),
        }
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn mlp_hidden(&self, stage: usize) -> usize {
        libm::round(self.channels(stage) as f64 * self.mlp_ratio).max(1.0) as usize
    }

    /// Token-map extents and channels of every stage for an `h × w` image.
    pub fn stage_shapes(&self, h: usize, w: usize) -> Result<[StageShape; NUM_STAGES]> {
        let p = self.patch_size;
        if p == 0 || h == 0 || w == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::Shape(format!("image {h}x{w} is not divisible by patch size {p}")));
        }
        let (mut th, mut tw) = (h / p, w / p);
        let mut out = [StageShape { h: 0, w: 0, c: 0 }; NUM_STAGES];
        for (s, slot) in out.iter_mut().enumerate() {
            if s > 0 {
                if th % 2 != 0 || tw % 2 != 0 {
                    return Err(Error::Shape(format!(
                        "stage {s} cannot merge an odd {th}x{tw} token map"
                    )));
                }
                th /= 2;
                tw /= 2;
            }
            *slot = StageShape { h: th, w: tw, c: self.channels(s) };
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_chans == 0 || self.embed_dim == 0 || self.window_size == 0 {
            return Err(Error::Config("channels, embed_dim and window_size must be >= 1".into()));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be > 0".into()));
        }
        for s in 0..NUM_STAGES {
            let (c, h) = (self.channels(s), self.num_heads[s]);
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!("{h} heads do not divide {c} channels at stage {s}")));
            }
            if self.depths[s] == 0 || !self.depths[s].is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "stage {s} depth {} must be even and >= 2 (regular/shifted pairs)",
                    self.depths[s]
                )));
            }
        }
        let (qh, qw) = self.query_extent;
        let (rh, rw) = self.reference_extent;
        self.stage_shapes(qh, qw)?;
        self.stage_shapes(rh, rw)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// A batch of token maps stored as `[batch·h·w, c]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMap {
    pub var: Var,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl TokenMap {
    pub fn rows(&self) -> usize {
        self.batch * self.h * self.w
    }

    fn with(&self, var: Var) -> Self {
        Self { var, ..*self }
    }
}

/// Per-stage outputs of one view.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub stages: Vec<TokenMap>,
}

impl StageFeatures {
    pub fn last(&self) -> TokenMap {
        *self.stages.last().expect("four stages")
    }
}

/// Effective window side and cyclic shift on an `h × w` map.
///
/// Maps no larger than the window use one window per image and no shift.
pub fn window_geometry(h: usize, w: usize, window: usize, shifted: bool) -> (usize, usize) {
    let side = h.min(w);
    if side <= window {
        (side, 0)
    } else {
        (window, if shifted { window / 2 } else { 0 })
    }
}

/// Row bookkeeping that turns a batch of maps into a batch of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLayout {
    pub window: usize,
    pub shift: usize,
    pub windows_per_image: usize,
    /// Source map row of every window slot (`None` for padding), `[B·nW·N]`.
    pub gather: Vec<Option<usize>>,
    /// Window slot holding every map row, `[B·h·w]`.
    pub scatter: Vec<usize>,
    /// Additive attention mask `[nW, N, N]`, present when windows straddle seams or padding.
    pub mask: Option<Tensor>,
}

impl WindowLayout {
    pub fn new(batch: usize, h: usize, w: usize, window: usize, shifted: bool) -> Result<Self> {
        if h == 0 || w == 0 || window == 0 {
            return Err(Error::Shape(format!("empty window layout for a {h}x{w} map")));
        }
        let (m, s) = window_geometry(h, w, window, shifted);
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let (nwh, nww) = (hp / m, wp / m);
        let nw = nwh * nww;
        let n = m * m;
        let region = |p: usize, ext: usize| -> usize {
            if p < ext - m {
                0
            } else if p < ext - s {
                1
            } else {
                2
            }
        };

        let mut gather = Vec::with_capacity(batch * nw * n);
        let mut scatter = vec![0usize; batch * h * w];
        let mut label = vec![0usize; nw * n];
        let mut valid = vec![true; nw * n];
        for b in 0..batch {
            for wy in 0..nwh {
                for wx in 0..nww {
                    for iy in 0..m {
                        for ix in 0..m {
                            let (ry, rx) = (wy * m + iy, wx * m + ix);
                            let (y, x) = ((ry + s) % hp, (rx + s) % wp);
                            let slot = ((wy * nww + wx) * m + iy) * m + ix;
                            if b == 0 {
                                label[slot] = region(ry, hp) * 3 + region(rx, wp);
                                valid[slot] = y < h && x < w;
                            }
                            if y < h && x < w {
                                let row = (b * h + y) * w + x;
                                gather.push(Some(row));
                                scatter[row] = b * nw * n + slot;
                            } else {
                                gather.push(None);
                            }
                        }
                    }
                }
            }
        }
        let needs_mask = s > 0 || hp != h || wp != w;
        let mask = needs_mask.then(|| {
            Tensor::from_fn(&[nw, n, n], |idx| {
                let win = idx / (n * n);
                let (i, j) = ((idx / n) % n, idx % n);
                let (a, k) = (win * n + i, win * n + j);
                if label[a] == label[k] && valid[k] {
                    0.0
                } else {
                    MASK_VALUE
                }
            })
        });
        Ok(Self { window: m, shift: s, windows_per_image: nw, gather, scatter, mask })
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

/// Index of each (query, key) pair of an `m × m` window into a bias table built for windows of side `table_window`.
pub fn relative_position_index(m: usize, table_window: usize) -> Vec<usize> {
    let n = m * m;
    let span = 2 * table_window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / m) as isize - (j / m) as isize + table_window as isize - 1;
            let dx = (i % m) as isize - (j % m) as isize + table_window as isize - 1;
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}

/// Multi-head self-attention inside windows with a learned relative-position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    /// `[(2M−1)², heads]`.
    pub bias_table: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub table_window: usize,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide {dim} channels")));
        }
        let lin = |store: &mut ParamStore, init: &mut Init<'_>, part: &str| {
            Linear::new(store, init, &format!("{name}.{part}"), dim, dim, true, WeightInit::TruncNormal)
        };
        let q = lin(store, init, "q");
        let k = lin(store, init, "k");
        let v = lin(store, init, "v");
        let proj = lin(store, init, "proj");
        let span = 2 * window - 1;
        let bias_table = store.add(format!("{name}.relative_position_bias_table"), Tensor::zeros(&[span * span, heads]));
        Ok(Self { q, k, v, proj, bias_table, heads, dim, table_window: window })
    }

    /// Attention over `x: [windows·N, C]` already in window order.
    ///
    /// `mask` is `[nW, N, N]`, shared by every image of the batch.
    pub fn forward_windows(
        &self,
        f: &mut Fwd<'_>,
        x: Var,
        window: usize,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        Ok(self.attend(f, x, window, mask)?.0)
    }

    /// Like [`Self::forward_windows`], also returning the attention
    /// probabilities `[windows·heads, N, N]`.
    pub fn attend(
        &self,
        f: &mut Fwd<'_>,
        x: Var,
        window: usize,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let n = window * window;
        if window > self.table_window {
            return Err(Error::Shape(format!(
                "window {window} exceeds the bias table window {}",
                self.table_window
            )));
        }
        let rows = f.tape.shape(x)[0];
        if !rows.is_multiple_of(n) {
            return Err(Error::Shape(format!("{rows} tokens do not form windows of {n}")));
        }
        let windows = rows / n;
        let (h, dh) = (self.heads, self.dim / self.heads);

        let split = |f: &mut Fwd<'_>, t: Var| -> Result<Var> {
            let t = f.tape.reshape(t, &[windows, n, h, dh])?;
            let t = f.tape.permute(t, &[0, 2, 1, 3])?;
            f.tape.reshape(t, &[windows * h, n, dh])
        };
        let q = self.q.forward(f, x)?;
        let q = f.tape.scale(q, 1.0 / libm::sqrt(dh as f64))?;
        let q = split(f, q)?;
        let k = self.k.forward(f, x)?;
        let k = split(f, k)?;
        let v = self.v.forward(f, x)?;
        let v = split(f, v)?;

        let logits = f.tape.bmm(q, k, false, true)?;
        let table = f.p(self.bias_table);
        let idx = relative_position_index(window, self.table_window);
        let bias = f.tape.gather_rows(table, idx.into_iter().map(Some).collect())?;
        let bias = f.tape.reshape(bias, &[n, n, h])?;
        let bias = f.tape.permute(bias, &[2, 0, 1])?;
        let mut logits = match mask {
            Some(m) => {
                let nw = m.shape()[0];
                if !windows.is_multiple_of(nw) || m.shape() != [nw, n, n] {
                    return Err(Error::Shape(format!("mask {:?} does not fit {windows} windows of {n}", m.shape())));
                }
                let logits = f.tape.reshape(logits, &[windows / nw, nw, h, n, n])?;
                let logits = f.tape.add_trailing(logits, bias)?;
                let per_head = Tensor::from_fn(&[nw, h, n, n], |i| {
                    let (w, rest) = (i / (h * n * n), i % (n * n));
                    m.data()[w * n * n + rest]
                });
                let mc = f.tape.constant(per_head);
                f.tape.add_trailing(logits, mc)?
            }
            None => {
                let logits = f.tape.reshape(logits, &[windows, h, n, n])?;
                f.tape.add_trailing(logits, bias)?
            }
        };
        let last = f.tape.shape(logits).len() - 1;
        logits = f.tape.softmax(logits, last)?;
        let attn = f.tape.reshape(logits, &[windows * h, n, n])?;
        let out = f.tape.bmm(attn, v, false, false)?;
        let out = f.tape.reshape(out, &[windows, h, n, dh])?;
        let out = f.tape.permute(out, &[0, 2, 1, 3])?;
        let out = f.tape.reshape(out, &[windows * n, self.dim])?;
        Ok((self.proj.forward(f, out)?, attn))
    }

    /// Partition `x` into (optionally shifted) windows, attend, and restore map order.
    pub fn forward_map(&self, f: &mut Fwd<'_>, x: TokenMap, shifted: bool) -> Result<Var> {
        let layout = WindowLayout::new(x.batch, x.h, x.w, self.table_window, shifted)?;
        let win = f.tape.gather_rows(x.var, layout.gather.clone())?;
        let out = self.forward_windows(f, win, layout.window, layout.mask.as_ref())?;
        f.tape.gather_rows(out, layout.scatter.iter().map(|&r| Some(r)).collect())
    }
}

/// Feed-forward part of a block: a plain MLP or a grid-routed mixture.
#[derive(Debug, Clone)]
pub enum Ffn {
    Mlp(Mlp),
    Moe(GmoeLayer),
}

#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
    pub shifted: bool,
}

/// Where a block sits, for routing records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPlace {
    pub view: View,
    pub stage: usize,
    pub block: usize,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_hidden: usize,
        shifted: bool,
        moe: Option<&GmoeConfig>,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let attn = WindowAttention::new(store, init, &format!("{name}.attn"), dim, heads, window)?;
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), dim);
        let ffn = match moe {
            Some(cfg) => Ffn::Moe(GmoeLayer::new(store, init, &format!("{name}.moe"), dim, cfg)),
            None => Ffn::Mlp(Mlp::new(store, init, &format!("{name}.mlp"), dim, mlp_hidden)),
        };
        Ok(Self { norm1, attn, norm2, ffn, shifted })
    }

    /// `x + attn(LN(x))`, then `+ ffn(LN(·))`.
    pub fn forward(
        &self,
        f: &mut Fwd<'_>,
        x: TokenMap,
        place: BlockPlace,
        gates: &mut Vec<GateRecord>,
    ) -> Result<TokenMap> {
        let h = self.norm1.forward(f, x.var)?;
        let a = self.attn.forward_map(f, x.with(h), self.shifted)?;
        let x1 = f.tape.add(x.var, a)?;
        let h2 = self.norm2.forward(f, x1)?;
        let y = match &self.ffn {
            Ffn::Mlp(mlp) => mlp.forward(f, h2)?,
            Ffn::Moe(moe) => {
                let (y, rec) = moe.forward(f, h2, x.batch, x.h, x.w, (place.view, place.stage, place.block))?;
                gates.push(rec);
                y
            }
        };
        Ok(x.with(f.tape.add(x1, y)?))
    }
}

/// 2×2 neighbourhood concatenation, LayerNorm and a `4C → 2C` projection.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(store, init, &format!("{name}.reduction"), 4 * dim, 2 * dim, false, WeightInit::TruncNormal),
        }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: TokenMap) -> Result<TokenMap> {
        if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) {
            return Err(Error::Shape(format!("patch merging needs even extents, got {}x{}", x.h, x.w)));
        }
        let (h2, w2) = (x.h / 2, x.w / 2);
        let mut rows = Vec::with_capacity(x.rows());
        for b in 0..x.batch {
            for y in 0..h2 {
                for xx in 0..w2 {
                    for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        rows.push(Some((b * x.h + 2 * y + dy) * x.w + 2 * xx + dx));
                    }
                }
            }
        }
        let g = f.tape.gather_rows(x.var, rows)?;
        let g = f.tape.reshape(g, &[x.batch * h2 * w2, 4 * x.c])?;
        let g = self.norm.forward(f, g)?;
        let var = self.reduction.forward(f, g)?;
        Ok(TokenMap { var, batch: x.batch, h: h2, w: w2, c: 2 * x.c })
    }
}

/// Strided patch convolution followed by LayerNorm over channels.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub patch: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, in_chans: usize, dim: usize, patch: usize) -> Self {
        Self {
            conv: Conv2d::new(store, init, &format!("{name}.proj"), in_chans, dim, patch, patch, 0, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            patch,
            dim,
        }
    }

    /// `images: [B, C, H, W]` to a token map of `H/P × W/P × d`.
    pub fn forward(&self, f: &mut Fwd<'_>, images: Var) -> Result<TokenMap> {
        let s = f.tape.shape(images).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected [B, C, H, W] images, got {s:?}")));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Shape(format!("image {h}x{w} is not divisible by patch size {}", self.patch)));
        }
        let t = self.conv.forward(f, images)?;
        let (th, tw) = (h / self.patch, w / self.patch);
        let t = f.tape.permute(t, &[0, 2, 3, 1])?;
        let t = f.tape.reshape(t, &[b * th * tw, self.dim])?;
        let var = self.norm.forward(f, t)?;
        Ok(TokenMap { var, batch: b, h: th, w: tw, c: self.dim })
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub merge: Option<PatchMerging>,
    pub blocks: Vec<SwinBlock>,
}

/// Patch embedding plus four stages; one parameter set serves both views.
#[derive(Debug, Clone)]
pub struct SwinEncoder {
    pub cfg: BackboneConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
}

impl SwinEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, cfg: &BackboneConfig, moe: &GmoeConfig) -> Result<Self> {
        cfg.validate()?;
        moe.validate()?;
        let embed = PatchEmbed::new(store, init, "backbone.patch_embed", cfg.in_chans, cfg.embed_dim, cfg.patch_size);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let dim = cfg.channels(s);
            let merge = (s > 0).then(|| PatchMerging::new(store, init, &format!("backbone.stages.{s}.downsample"), dim / 2));
            let mut blocks = Vec::with_capacity(cfg.depths[s]);
            for b in 0..cfg.depths[s] {
                let use_moe = moe.insertion[s].applies(b).then_some(moe);
                blocks.push(SwinBlock::new(
                    store,
                    init,
                    &format!("backbone.stages.{s}.blocks.{b}"),
                    dim,
                    cfg.num_heads[s],
                    cfg.window_size,
                    cfg.mlp_hidden(s),
                    b % 2 == 1,
                    use_moe,
                )?);
            }
            stages.push(Stage { merge, blocks });
        }
        Ok(Self { cfg: cfg.clone(), embed, stages })
    }

    /// Runs one view; GMoE routing records are appended to `gates`.
    pub fn encode(&self, f: &mut Fwd<'_>, images: Var, view: View, gates: &mut Vec<GateRecord>) -> Result<StageFeatures> {
        let mut x = self.embed.forward(f, images)?;
        let mut out = Vec::with_capacity(NUM_STAGES);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                x = m.forward(f, x)?;
            }
            for (b, blk) in stage.blocks.iter().enumerate() {
                x = blk.forward(f, x, BlockPlace { view, stage: s, block: b }, gates)?;
            }
            out.push(x);
        }
        Ok(StageFeatures { stages: out })
    }

    /// Both views through the same parameters.
    pub fn encode_pair(
        &self,
        f: &mut Fwd<'_>,
        query: Var,
        reference: Var,
        gates: &mut Vec<GateRecord>,
    ) -> Result<(StageFeatures, StageFeatures)> {
        let q = self.encode(f, query, View::Query, gates)?;
        let r = self.encode(f, reference, View::Reference, gates)?;
        Ok((q, r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_shapes_schedule() {
        let cfg = BackboneConfig::desk();
        let s = cfg.stage_shapes(128, 128).unwrap();
        let got: Vec<_> = s.iter().map(|t| (t.h, t.w, t.c)).collect();
        assert_eq!(got, vec![(32, 32, 16), (16, 16, 32), (8, 8, 64), (4, 4, 128)]);
        let full = BackboneConfig::full().stage_shapes(1024, 1024).unwrap();
        assert_eq!((full[0].h, full[0].c), (256, 96));
        assert_eq!((full[3].h, full[3].w, full[3].c), (32, 32, 768));
        assert!(matches!(cfg.stage_shapes(130, 128), Err(Error::Shape(_))));
    }

    #[test]
    fn window_layout_covers_every_token_once() {
        for &(h, w, m, sh) in &[(4, 4, 2, false), (4, 4, 2, true), (6, 5, 4, true), (8, 8, 4, true), (2, 2, 4, true)] {
            let l = WindowLayout::new(2, h, w, m, sh).unwrap();
            let mut seen = vec![0; 2 * h * w];
            for r in l.gather.iter().flatten() {
                seen[*r] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1), "{h}x{w} m={m}");
            for (row, &slot) in l.scatter.iter().enumerate() {
                assert_eq!(l.gather[slot], Some(row));
            }
        }
    }

    #[test]
    fn unshifted_divisible_layout_has_no_mask() {
        assert!(WindowLayout::new(1, 8, 8, 4, false).unwrap().mask.is_none());
        let l = WindowLayout::new(1, 8, 8, 4, true).unwrap();
        assert_eq!(l.shift, 2);
        assert!(l.mask.is_some());
        let small = WindowLayout::new(1, 4, 4, 4, true).unwrap();
        assert_eq!((small.window, small.shift), (4, 0));
    }

    #[test]
    fn relative_index_range() {
        let idx = relative_position_index(4, 4);
        assert_eq!(idx.len(), 256);
        assert_eq!(*idx.iter().max().unwrap(), 48);
        assert_eq!(idx[0], 3 * 7 + 3);
        let small = relative_position_index(2, 4);
        assert!(small.iter().all(|&i| i < 49));
    }
}
