//! Forward rules of every differentiable op.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{mismatch, Error, Result};
use crate::kernels::{self, gemm, ConvGeom};
use crate::tape::{Op, Tape, Var};

/// Normalization statistics used by [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Per-batch statistics (training).
    Batch { eps: f64 },
    /// Frozen running statistics (inference).
    Running { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Per-channel batch mean and biased variance from a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", &shape, data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push("sub", &shape, data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", &shape, data, Op::Mul(a, b))
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s (bias-style broadcast).
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(mismatch("add_trailing", xs, ys));
        }
        let n = self.value(y).numel().max(1);
        let yd = self.data(y);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + yd[i % n])
            .collect();
        let shape = xs.to_vec();
        self.push("add_trailing", &shape, data, Op::AddTrailing(x, y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", &shape, data, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", &shape, data, Op::AddScalar(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| libm::fabs(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("abs", &shape, data, Op::Abs(x))
    }

    /// 2-D matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, n, k, self.data(a), false, self.data(b), false, &mut out, false);
        self.push("matmul", &[m, n], out, Op::MatMul(a, b))
    }

    /// `x·w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let k = *xs.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(mismatch("linear", &xs, ws));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(mismatch("linear bias", self.shape(b), &[n]));
            }
        }
        let rows = self.value(x).numel() / k.max(1);
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bd = self.data(b);
            for r in out.chunks_mut(n) {
                r.copy_from_slice(bd);
            }
        }
        gemm(rows, n, k, self.data(x), false, self.data(w), false, &mut out, b.is_some());
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        self.push("linear", &shape, out, Op::Linear { x, w, b })
    }

    /// Batched product over a leading axis. With `ta`, `a` is stored `[B,k,m]`;
    /// with `tb`, `b` is stored `[B,n,k]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", sa, sb));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(mismatch("bmm", sa, sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                n,
                k,
                &ad[i * m * k..(i + 1) * m * k],
                ta,
                &bd[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(
            "bmm",
            &[batch, m, n],
            out,
            Op::BatchMatMul { a, b, ta, tb, batch, m, k, n },
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(xd[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = libm::exp(xd[base + j * inner] - max);
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        self.push("softmax", &shape, out, Op::Softmax { x, outer, len, inner })
    }

    /// Normalizes over the last axis, then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!("layer_norm eps must be a finite value >= 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(mismatch("layer_norm affine", self.shape(gamma), &[n]));
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / n.max(1);
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = gd[j] * h + bd[j];
            }
        }
        self.push("layer_norm", &shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", &shape, data, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("sigmoid", &shape, data, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", &shape, data, Op::Relu(x))
    }

    /// Cross-correlation of `x: [C,H,W]` or `[B,C,H,W]` with `w: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let batched = xs.len() == 4;
        let (batch, c, h, wd) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => return Err(Error::Shape(format!("conv2d input must be [C,H,W] or [B,C,H,W], got {xs:?}"))),
        };
        if ws.len() != 4 || ws[1] != c {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(mismatch("conv2d bias", self.shape(b), &[o]));
            }
        }
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if kh > ph || kw > pw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not tile input {h}x{wd}"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_ch: c,
            height: h,
            width: wd,
            out_ch: o,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.data(x), &geom);
        let rows = geom.col_rows();
        let mut rowmajor = vec![0.0; rows * o];
        gemm(rows, o, geom.col_width(), &cols, false, self.data(w), true, &mut rowmajor, false);
        let plane = geom.out_h * geom.out_w;
        let mut out = vec![0.0; batch * o * plane];
        let bias = b.map(|b| self.data(b));
        for bi in 0..batch {
            for p in 0..plane {
                let src = &rowmajor[(bi * plane + p) * o..(bi * plane + p + 1) * o];
                for oc in 0..o {
                    out[(bi * o + oc) * plane + p] = src[oc] + bias.map_or(0.0, |bd| bd[oc]);
                }
            }
        }
        let shape: Vec<usize> = if batched {
            vec![batch, o, geom.out_h, geom.out_w]
        } else {
            vec![o, geom.out_h, geom.out_w]
        };
        self.push("conv2d", &shape, out, Op::Conv2d { x, w, b, geom, cols })
    }

    /// Per-channel normalization of `[B,C,H,W]` (or `[C,H,W]`) maps.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BnStats>)> {
        let xs = self.shape(x).to_vec();
        let (batch, c, plane) = match xs.len() {
            3 => (1, xs[0], xs[1] * xs[2]),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => return Err(Error::Shape(format!("batch_norm input must be 3-D or 4-D, got {xs:?}"))),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm affine", self.shape(gamma), &[c]));
        }
        let eps = match mode {
            BnMode::Batch { eps } | BnMode::Running { eps, .. } => eps,
        };
        if !(eps > 0.0) {
            return Err(Error::Config(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let xd = self.data(x);
        let count = (batch * plane) as f64;
        let (mean, var, stats) = match mode {
            BnMode::Batch { .. } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for b in 0..batch {
                        v += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .map(|x| (x - m) * (x - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                }
                let stats = BnStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
            BnMode::Running { mean, var, .. } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batch_norm running stats", &[mean.len()], &[c]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for p in 0..plane {
                    let h = (xd[base + p] - mean[ch]) * rstd[ch];
                    xhat[base + p] = h;
                    out[base + p] = gd[ch] * h + bd[ch];
                }
            }
        }
        let batch_stats = matches!(mode, BnMode::Batch { .. });
        let v = self.push(
            "batch_norm",
            &xs,
            out,
            Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats, channels: c, plane },
        )?;
        Ok((v, stats))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", &[], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        if d.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", &[], vec![s], Op::Mean(x))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape(format!("cannot reduce axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xd[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        self.push(
            if mean { "mean_axis" } else { "sum_axis" },
            &oshape,
            out,
            Op::ReduceAxis { x, outer, len, inner, mean },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape, data, Op::Reshape(x))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || core::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("invalid permutation {axes:?} for {shape:?}")));
        }
        let index = kernels::permute_index(&shape, axes);
        let xd = self.data(x);
        let data = index.iter().map(|&i| xd[i]).collect();
        let oshape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        self.push("permute", &oshape, data, Op::Permute { x, index })
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::Shape(format!("transpose needs a matrix, got {:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    /// Selects rows (leading-axis slices) of `x`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::Shape("gather on scalar".into()));
        }
        let n = shape[0];
        let row_len: usize = shape[1..].iter().product();
        if let Some(bad) = rows.iter().flatten().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("gather row {bad} out of range for {n} rows")));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; rows.len() * row_len];
        for (dst, r) in out.chunks_mut(row_len.max(1)).zip(&rows) {
            if let Some(r) = r {
                dst.copy_from_slice(&xd[r * row_len..(r + 1) * row_len]);
            }
        }
        let mut oshape = shape;
        oshape[0] = rows.len();
        self.push("gather", &oshape, out, Op::Gather { x, rows, row_len })
    }

    /// Sums row `i` of `x` into output row `rows[i]` of a zero `[out_rows, ...]` tensor.
    pub fn scatter_add_rows(&mut self, x: Var, rows: Vec<usize>, out_rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != rows.len() {
            return Err(mismatch("scatter_add_rows", &shape, &[rows.len()]));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= out_rows) {
            return Err(Error::Shape(format!("scatter row {bad} out of range for {out_rows} rows")));
        }
        let row_len: usize = shape[1..].iter().product();
        let xd = self.data(x);
        let mut out = vec![0.0; out_rows * row_len];
        for (i, &r) in rows.iter().enumerate() {
            for (d, s) in out[r * row_len..(r + 1) * row_len].iter_mut().zip(&xd[i * row_len..(i + 1) * row_len]) {
                *d += s;
            }
        }
        let mut oshape = shape;
        oshape[0] = out_rows;
        self.push("scatter_add", &oshape, out, Op::ScatterAdd { x, rows, row_len })
    }

    /// Mean of each listed set of rows of a matrix: `[R,C] -> [segments, C]`.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("segment_mean needs a matrix, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if segments.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("segment_mean over an empty segment".into()));
        }
        if let Some(bad) = segments.iter().flatten().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("segment row {bad} out of range for {n} rows")));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            let dst = &mut out[s * c..(s + 1) * c];
            for &r in seg {
                for (d, v) in dst.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                    *d += v;
                }
            }
            let inv = 1.0 / seg.len() as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        self.push("segment_mean", &[segments.len(), c], out, Op::SegmentMean { x, segments, row_len: c })
    }

    /// Multiplies every row `r` of `x` by the scalar `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape.first().copied().unwrap_or(0);
        if self.value(w).numel() != rows {
            return Err(mismatch("scale_rows", &shape, self.shape(w)));
        }
        let row_len: usize = shape[1..].iter().product();
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            for j in 0..row_len {
                out[r * row_len + j] = xd[r * row_len + j] * wd[r];
            }
        }
        self.push("scale_rows", &shape, out, Op::ScaleRows { x, w, row_len })
    }

    /// `[R,Ca] ++ [R,Cb] -> [R,Ca+Cb]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(mismatch("concat_cols", &sa, &sb));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        self.push("concat_cols", &[rows, ca + cb], out, Op::ConcatCols { a, b, ca, cb })
    }

    /// Per row of `[R,E]` logits: keep the `k` largest (ties to the lowest index),
    /// softmax over that set, zero elsewhere. Returns the dense weights and the
    /// selected ids (`R·k`, each row in descending-score order).
    pub fn topk_softmax(&mut self, x: Var, k: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("topk_softmax needs [R,E] logits, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if k == 0 || k > cols {
            return Err(Error::Config(format!("top_k must be in 1..={cols}, got {k}")));
        }
        let xd = self.data(x);
        let mut selected = Vec::with_capacity(rows * k);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let sel = top_k_indices(row, k);
            let max = row[sel[0]];
            let denom: f64 = sel.iter().map(|&i| libm::exp(row[i] - max)).sum();
            for &i in &sel {
                out[r * cols + i] = libm::exp(row[i] - max) / denom;
            }
            selected.extend_from_slice(&sel);
        }
        let v = self.push(
            "topk_softmax",
            &shape,
            out,
            Op::TopKSoftmax { x, selected: selected.clone(), k, cols },
        )?;
        Ok((v, selected))
    }

    /// `(1/R)·Σ_r Σ_i w_ri·ln w_ri` over a `[R,E]` matrix of distributions, with `0·ln 0 = 0`.
    pub fn neg_entropy_mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Shape(format!("neg_entropy_mean needs non-empty [R,E], got {shape:?}")));
        }
        let rows = shape[0];
        if self.data(x).iter().any(|&w| w < 0.0) {
            return Err(Error::Input("entropy of negative weights".into()));
        }
        let s: f64 = self
            .data(x)
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| w * libm::log(w))
            .sum();
        self.push("neg_entropy_mean", &[], vec![s / rows as f64], Op::NegEntropyMean { x, rows })
    }

    /// Penalty-reduced focal loss over heatmap cells; cells whose target equals 1
    /// are positives and the sum is divided by their count.
    pub fn focal_loss(&mut self, pred: Var, target: &[f64], gamma: f64, beta: f64) -> Result<Var> {
        let pd = self.data(pred);
        if pd.len() != target.len() {
            return Err(mismatch("focal_loss", self.shape(pred), &[target.len()]));
        }
        if gamma < 0.0 || beta < 0.0 {
            return Err(Error::Config(format!("focal exponents must be >= 0 (gamma={gamma}, beta={beta})")));
        }
        let npos = target.iter().filter(|&&y| y == 1.0).count();
        if npos == 0 {
            return Err(Error::Degenerate("focal loss needs at least one positive cell".into()));
        }
        let mut s = 0.0;
        for (&p, &y) in pd.iter().zip(target) {
            s += focal_term(p, y, gamma, beta);
        }
        let npos = npos as f64;
        self.push(
            "focal_loss",
            &[],
            vec![s / npos],
            Op::Focal { pred, target: target.to_vec(), gamma, beta, npos },
        )
    }
}

pub(crate) const LOG_EPS: f64 = 1e-12;

fn clamped_ln(v: f64) -> f64 {
    libm::log(v.max(LOG_EPS))
}

fn powf(base: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else {
        libm::pow(base, e)
    }
}

/// Loss contribution of one heatmap cell (already negated).
pub(crate) fn focal_term(p: f64, y: f64, gamma: f64, beta: f64) -> f64 {
    if y == 1.0 {
        -powf(1.0 - p, gamma) * clamped_ln(p)
    } else {
        -powf(1.0 - y, beta) * powf(p, gamma) * clamped_ln(1.0 - p)
    }
}

/// d(focal_term)/dp, treating the log clamp as a constant below `LOG_EPS`.
pub(crate) fn focal_term_grad(p: f64, y: f64, gamma: f64, beta: f64) -> f64 {
    if y == 1.0 {
        let dlog = if p > LOG_EPS { 1.0 / p } else { 0.0 };
        let dpow = if gamma == 0.0 { 0.0 } else { -gamma * powf(1.0 - p, gamma - 1.0) };
        -(dpow * clamped_ln(p) + powf(1.0 - p, gamma) * dlog)
    } else {
        let q = 1.0 - p;
        let dlog = if q > LOG_EPS { -1.0 / q } else { 0.0 };
        let dpow = if gamma == 0.0 { 0.0 } else { gamma * powf(p, gamma - 1.0) };
        -powf(1.0 - y, beta) * (dpow * clamped_ln(q) + powf(p, gamma) * dlog)
    }
}

/// Indices of the `k` largest entries, descending; equal values keep index order.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
