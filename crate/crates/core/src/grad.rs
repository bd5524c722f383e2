//! Backward rules, one arm per [`Op`].

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, gemm};
use crate::ops::focal_term_grad;
use crate::tape::{Op, Tape};
use crate::tensor::Tensor;

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub(crate) fn backward_op(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::AddTrailing(x, y) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gy) = self.slot(grads, *y) {
                    let n = gy.len().max(1);
                    for (i, v) in g.iter().enumerate() {
                        gy[i % n] += v;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Abs(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        let s = if xd[i] > 0.0 {
                            1.0
                        } else if xd[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[i] += s * g[i];
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let k = self.shape(*w)[0];
                let n = self.shape(*w)[1];
                let rows = self.value(*x).numel() / k.max(1);
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(rows, k, n, g, false, wd, true, gx, true);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(k, n, rows, xd, true, g, false, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for r in g.chunks(n) {
                            add_into(gb, r);
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, k, n, g, false, bd, true, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, n, m, ad, true, g, false, gb, true);
                }
            }
            Op::BatchMatMul { a, b, ta, tb, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *ta {
                            gemm(k, m, n, bi, *tb, gi, true, dst, true);
                        } else {
                            gemm(m, k, n, gi, false, bi, !*tb, dst, true);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *tb {
                            gemm(n, k, m, gi, true, ai, *ta, dst, true);
                        } else {
                            gemm(k, n, m, ai, !*ta, gi, false, dst, true);
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..*len {
                                let p = base + j * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.shape(*gamma)[0];
                let gd = self.data(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; n];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            dh[j] = gr[j] * gd[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xd[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = geom.out_ch;
                let plane = geom.out_h * geom.out_w;
                let rows = geom.col_rows();
                // [B,O,H',W'] -> [B·H'·W', O]
                let mut grow = vec![0.0; rows * o];
                for bi in 0..geom.batch {
                    for oc in 0..o {
                        for p in 0..plane {
                            grow[(bi * plane + p) * o + oc] = g[(bi * o + oc) * plane + p];
                        }
                    }
                }
                let width = geom.col_width();
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(o, width, rows, &grow, true, cols, false, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for r in grow.chunks(o) {
                            add_into(gb, r);
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![0.0; rows * width];
                    gemm(rows, width, o, &grow, false, self.data(*w), false, &mut gcols, false);
                    if let Some(gx) = self.slot(grads, *x) {
                        kernels::col2im_add(&gcols, geom, gx);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats, channels, plane } => {
                let (c, plane) = (*channels, *plane);
                let batch = g.len() / (c * plane).max(1);
                let gd = self.data(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gh = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for p in 0..plane {
                            sum_g[ch] += g[base + p];
                            sum_gh[ch] += g[base + p] * xhat[base + p];
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    add_into(gg, &sum_gh);
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    add_into(gb, &sum_g);
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let m = (batch * plane) as f64;
                    for b in 0..batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for p in 0..plane {
                                let i = base + p;
                                gx[i] += if *batch_stats {
                                    gd[ch] * rstd[ch] * (g[i] - sum_g[ch] / m - xhat[i] * sum_gh[ch] / m)
                                } else {
                                    gd[ch] * rstd[ch] * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::ReduceAxis { x, outer, len, inner, mean } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let scale = if *mean { 1.0 / *len as f64 } else { 1.0 };
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..*len {
                            let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s * scale;
                            }
                        }
                    }
                }
            }
            Op::Permute { x, index } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &src) in index.iter().enumerate() {
                        gx[src] += g[i];
                    }
                }
            }
            Op::Gather { x, rows, row_len } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = *row_len;
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = r {
                            add_into(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                        }
                    }
                }
            }
            Op::ScatterAdd { x, rows, row_len } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = *row_len;
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SegmentMean { x, segments, row_len } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = *row_len;
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        let src = &g[s * c..(s + 1) * c];
                        for &r in seg {
                            for (d, v) in gx[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *d += v * inv;
                            }
                        }
                    }
                }
            }
            Op::ScaleRows { x, w, row_len } => {
                let n = *row_len;
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, wr) in wd.iter().enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += g[r * n + j] * wr;
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for (r, d) in gw.iter_mut().enumerate() {
                        *d += (0..n).map(|j| g[r * n + j] * xd[r * n + j]).sum::<f64>();
                    }
                }
            }
            Op::ConcatCols { a, b, ca, cb } => {
                let w = ca + cb;
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, dst) in ga.chunks_mut((*ca).max(1)).enumerate() {
                        add_into(dst, &g[r * w..r * w + ca]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (r, dst) in gb.chunks_mut((*cb).max(1)).enumerate() {
                        add_into(dst, &g[r * w + ca..(r + 1) * w]);
                    }
                }
            }
            Op::TopKSoftmax { x, selected, k, cols } => {
                let y = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, sel) in selected.chunks(*k).enumerate() {
                        let base = r * cols;
                        let dot: f64 = sel.iter().map(|&i| g[base + i] * y[base + i]).sum();
                        for &i in sel {
                            gx[base + i] += y[base + i] * (g[base + i] - dot);
                        }
                    }
                }
            }
            Op::NegEntropyMean { x, rows, .. } => {
                let xd = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / *rows as f64;
                    for (d, &w) in gx.iter_mut().zip(xd) {
                        if w > 0.0 {
                            *d += s * (libm::log(w) + 1.0);
                        }
                    }
                }
            }
            Op::Focal { pred, target, gamma, beta, npos } => {
                let pd = self.data(*pred);
                if let Some(gp) = self.slot(grads, *pred) {
                    let s = g[0] / npos;
                    for i in 0..pd.len() {
                        gp[i] += s * focal_term_grad(pd[i], target[i], *gamma, *beta);
                    }
                }
            }
        }
    }
}
