use alloc::vec;
use alloc::vec::Vec;

use super::kernels::conv_pad;
use super::{axis_split, Graph, Node, Op, Var};
use crate::{Error, Result};

/// Gradient buffer of `v`, allocated on first use; `None` when `v` does not
/// require a gradient.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    /// Populate gradients of every `requires_grad` node reachable from the
    /// scalar `loss`. Gradients from multiple uses of a node accumulate.
    /// Earlier gradients in this graph are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract("backward requires a scalar loss"));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.as_slice();
        let shape = |v: Var| nodes[v.0].shape.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if let Some(ga) = slot(grads, nodes, *a) {
                    let bv = val(*b);
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[r * k + p] += g[r * n..(r + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    let av = val(*a);
                    for r in 0..m {
                        for p in 0..k {
                            let a_rp = av[r * k + p];
                            for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *o += a_rp * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (shape(*a)[0], shape(*a)[1]);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (d_in, d_out) = (shape(*w)[0], shape(*w)[1]);
                let rows = g.len() / d_out;
                if let Some(gx) = slot(grads, nodes, *x) {
                    let wv = val(*w);
                    for r in 0..rows {
                        let grow = &g[r * d_out..(r + 1) * d_out];
                        for p in 0..d_in {
                            gx[r * d_in + p] += grow.iter().zip(&wv[p * d_out..(p + 1) * d_out]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = slot(grads, nodes, *w) {
                    let xv = val(*x);
                    for r in 0..rows {
                        let grow = &g[r * d_out..(r + 1) * d_out];
                        for p in 0..d_in {
                            let xp = xv[r * d_in + p];
                            for (o, gy) in gw[p * d_out..(p + 1) * d_out].iter_mut().zip(grow) {
                                *o += xp * gy;
                            }
                        }
                    }
                }
                if let Some(gb) = b.and_then(|b| slot(grads, nodes, b)) {
                    for grow in g.chunks_exact(d_out) {
                        add_into(gb, grow);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    add_into(gb, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((o, gy), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += gy * y;
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for ((o, gy), x) in gb.iter_mut().zip(g).zip(&av) {
                        *o += gy * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (o, gy) in ga.iter_mut().zip(g) {
                        *o += c * gy;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((o, gy), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        if *y > 0.0 {
                            *o += gy;
                        }
                    }
                }
            }
            Op::Glu(x) => {
                let w = *shape(*x).last().unwrap();
                let h = w / 2;
                if let Some(gx) = slot(grads, nodes, *x) {
                    let xv = val(*x);
                    for (r, grow) in g.chunks_exact(h).enumerate() {
                        for j in 0..h {
                            let a = xv[r * w + j];
                            let s = crate::math::sigmoid(xv[r * w + h + j]);
                            gx[r * w + j] += grow[j] * s;
                            gx[r * w + h + j] += grow[j] * a * s * (1.0 - s);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                if let Some(gx) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for q in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + q;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let len = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(len).zip(g.chunks_exact(len)).zip(y.chunks_exact(len)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gy), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gy - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = val(*gamma).to_vec();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (gr[j] * gv[j] - m1 - xr[j] * m2);
                        }
                    }
                }
                if let Some(gg) = slot(grads, nodes, *gamma) {
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *beta) {
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    add_into(gx, g);
                }
            }
            Op::SliceLast { x, start } => {
                let w = *shape(*x).last().unwrap();
                let len = *node.shape.last().unwrap();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (gxr, gr) in gx.chunks_exact_mut(w).zip(g.chunks_exact(len)) {
                        add_into(&mut gxr[*start..start + len], gr);
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let wa = *shape(*a).last().unwrap();
                let w = *node.shape.last().unwrap();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (o, gr) in ga.chunks_exact_mut(wa).zip(g.chunks_exact(w)) {
                        add_into(o, &gr[..wa]);
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for (o, gr) in gb.chunks_exact_mut(w - wa).zip(g.chunks_exact(w)) {
                        add_into(o, &gr[wa..]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(gp) = slot(grads, nodes, p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::AttnScores { q, k, heads, scale } => {
                let (nq, d) = (shape(*q)[0], shape(*q)[1]);
                let nkv = shape(*k)[0];
                let dk = d / heads;
                let (qv, kv) = (val(*q), val(*k));
                if let Some(gq) = slot(grads, nodes, *q) {
                    for h in 0..*heads {
                        for i in 0..nq {
                            for j in 0..nkv {
                                let s = scale * g[(h * nq + i) * nkv + j];
                                let kj = &kv[j * d + h * dk..j * d + (h + 1) * dk];
                                for (o, x) in gq[i * d + h * dk..i * d + (h + 1) * dk].iter_mut().zip(kj) {
                                    *o += s * x;
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = slot(grads, nodes, *k) {
                    for h in 0..*heads {
                        for i in 0..nq {
                            let qi = &qv[i * d + h * dk..i * d + (h + 1) * dk];
                            for j in 0..nkv {
                                let s = scale * g[(h * nq + i) * nkv + j];
                                for (o, x) in gk[j * d + h * dk..j * d + (h + 1) * dk].iter_mut().zip(qi) {
                                    *o += s * x;
                                }
                            }
                        }
                    }
                }
            }
            Op::AttnContext { w, v, heads } => {
                let (nkv, d) = (shape(*v)[0], shape(*v)[1]);
                let nq = shape(*w)[1];
                let dk = d / heads;
                let (wv, vv) = (val(*w), val(*v));
                if let Some(gw) = slot(grads, nodes, *w) {
                    for h in 0..*heads {
                        for i in 0..nq {
                            let gi = &g[i * d + h * dk..i * d + (h + 1) * dk];
                            for j in 0..nkv {
                                let vj = &vv[j * d + h * dk..j * d + (h + 1) * dk];
                                gw[(h * nq + i) * nkv + j] += gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(gv) = slot(grads, nodes, *v) {
                    for h in 0..*heads {
                        for i in 0..nq {
                            let gi = &g[i * d + h * dk..i * d + (h + 1) * dk];
                            for j in 0..nkv {
                                let wij = wv[(h * nq + i) * nkv + j];
                                for (o, x) in gv[j * d + h * dk..j * d + (h + 1) * dk].iter_mut().zip(gi) {
                                    *o += wij * x;
                                }
                            }
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, kernel, causal } => {
                let (groups, k) = (shape(*kernel)[0], shape(*kernel)[1]);
                conv_backward(grads, nodes, g, *x, *kernel, groups, k, *causal, |_, grp| grp * k);
            }
            Op::DynamicConv { x, kernels, causal } => {
                let (groups, k) = (shape(*kernels)[1], shape(*kernels)[2]);
                conv_backward(grads, nodes, g, *x, *kernels, groups, k, *causal, |pos, grp| (pos * groups + grp) * k);
            }
            Op::Embedding { table, ids, scale } => {
                let d = shape(*table)[1];
                if let Some(gt) = slot(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, gy) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += scale * gy;
                        }
                    }
                }
            }
            Op::MulConst { x, factors } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((o, gy), f) in gx.iter_mut().zip(g).zip(factors) {
                        *o += gy * f;
                    }
                }
            }
            Op::SmoothedCe {
                logits,
                targets,
                eps,
                probs,
            } => {
                let vocab = shape(*logits)[1];
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let s = g[0] / count;
                let uniform = eps / vocab as f64;
                if let Some(gl) = slot(grads, nodes, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..vocab {
                            let target = if j == t { 1.0 - eps + uniform } else { uniform };
                            gl[r * vocab + j] += s * (probs[r * vocab + j] - target);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    g: &[f64],
    x: Var,
    kernel: Var,
    groups: usize,
    k: usize,
    causal: bool,
    kernel_at: impl Fn(usize, usize) -> usize,
) {
    let (n, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
    let per = c / groups;
    let pad = conv_pad(k, causal) as isize;
    let xv = &nodes[x.0].value;
    let kv = &nodes[kernel.0].value;
    // y[pos, ch] = Σ_m kern[pos, grp, m] · x[pos + m - pad, ch]
    let src = |pos: usize, m: usize| -> Option<usize> {
        let s = pos as isize + m as isize - pad;
        (0..n as isize).contains(&s).then_some(s as usize)
    };
    if let Some(gx) = slot(grads, nodes, x) {
        for pos in 0..n {
            for grp in 0..groups {
                let base = kernel_at(pos, grp);
                for m in 0..k {
                    let Some(s) = src(pos, m) else { continue };
                    let w = kv[base + m];
                    for ch in grp * per..(grp + 1) * per {
                        gx[s * c + ch] += w * g[pos * c + ch];
                    }
                }
            }
        }
    }
    if let Some(gk) = slot(grads, nodes, kernel) {
        for pos in 0..n {
            for grp in 0..groups {
                let base = kernel_at(pos, grp);
                for m in 0..k {
                    let Some(s) = src(pos, m) else { continue };
                    let mut acc = 0.0;
                    for ch in grp * per..(grp + 1) * per {
                        acc += xv[s * c + ch] * g[pos * c + ch];
                    }
                    gk[base + m] += acc;
                }
            }
        }
    }
}
