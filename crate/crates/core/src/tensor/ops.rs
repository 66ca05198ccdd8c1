use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, Count, NoCount};
use super::{axis_split, Graph, Op, Var};
use crate::math;
use crate::{Error, Result};

/// Run a counted kernel, charging its ticks to the graph when counting.
macro_rules! counted {
    ($g:expr, $f:path, $($arg:expr),* $(,)?) => {{
        if $g.counting() {
            let mut c = Count(0);
            let r = $f($($arg),*, &mut c);
            $g.add_macs(c.0);
            r
        } else {
            $f($($arg),*, &mut NoCount)
        }
    }};
}

impl Graph {
    fn last_dim(&self, v: Var) -> usize {
        *self.shape(v).last().unwrap()
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let c = counted!(self, kernels::matmul, self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], c, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("transpose", a)?;
        let x = self.value(a);
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], y, Op::Transpose(a), &[a]))
    }

    /// Affine map over the last axis; `w` is `[d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (d_in, d_out) = self.rank2("linear", w)?;
        if self.last_dim(x) != d_in {
            return Err(Error::dim("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::dim("linear bias", self.shape(b), &[d_out]));
            }
        }
        let rows = self.value(x).len() / d_in;
        let y = counted!(
            self,
            kernels::linear,
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            rows,
            d_in,
            d_out,
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = d_out;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(shape, y, Op::Linear { x, w, b }, &inputs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), y, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(self.shape(a).to_vec(), y, Op::Relu(a), &[a])
    }

    /// Gated linear unit over the last axis: `a ⊙ σ(b)` for halves `[a | b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let w = self.last_dim(x);
        if !w.is_multiple_of(2) {
            return Err(Error::dim("glu", self.shape(x), &[w + 1]));
        }
        let h = w / 2;
        let y = self
            .value(x)
            .chunks_exact(w)
            .flat_map(|row| {
                let (a, b) = row.split_at(h);
                a.iter().zip(b).map(|(a, b)| a * math::sigmoid(*b))
            })
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = h;
        Ok(self.push(shape, y, Op::Glu(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax axis", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.value(x);
        let mut y = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    let x = v[idx(l)];
                    if !x.is_finite() {
                        return Err(Error::numeric("non-finite softmax input"));
                    }
                    mx = mx.max(x);
                }
                let mut z = 0.0;
                for l in 0..len {
                    let e = math::exp(v[idx(l)] - mx);
                    y[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    y[idx(l)] /= z;
                }
            }
        }
        Ok(self.push(shape, y, Op::Softmax { x, axis }, &[x]))
    }

    /// Softmax over the last axis where `allowed[i * n_kv + j] == false`
    /// forces weight exactly 0. The mask covers the trailing two axes
    /// `[n_q, n_kv]` and broadcasts over leading ones.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || allowed.len() != shape[shape.len() - 2] * shape[shape.len() - 1] {
            return Err(Error::dim("masked_softmax", &shape, &[allowed.len()]));
        }
        let n_kv = shape[shape.len() - 1];
        let plane = allowed.len();
        let v = self.value(x);
        let mut y = vec![0.0; v.len()];
        for (r, (xrow, yrow)) in v.chunks_exact(n_kv).zip(y.chunks_exact_mut(n_kv)).enumerate() {
            let m = &allowed[(r * n_kv) % plane..(r * n_kv) % plane + n_kv];
            let mut mx = f64::NEG_INFINITY;
            for (x, &ok) in xrow.iter().zip(m) {
                if ok {
                    if !x.is_finite() {
                        return Err(Error::numeric("non-finite attention logits"));
                    }
                    mx = mx.max(*x);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::contract(format!("attention row {} is fully masked", (r * n_kv % plane) / n_kv)));
            }
            let mut z = 0.0;
            for ((x, yv), &ok) in xrow.iter().zip(yrow.iter_mut()).zip(m) {
                if ok {
                    *yv = math::exp(x - mx);
                    z += *yv;
                }
            }
            for yv in yrow.iter_mut() {
                *yv /= z;
            }
        }
        Ok(self.push(shape, y, Op::MaskedSoftmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim(x);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let v = self.value(x);
        let rows = v.len() / d;
        let mut y = vec![0.0; v.len()];
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let y = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), y, Op::Reshape(x), &[x]))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let w = self.last_dim(x);
        if len == 0 || start + len > w {
            return Err(Error::dim("slice_last", self.shape(x), &[start, len]));
        }
        let y = self
            .value(x)
            .chunks_exact(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(shape, y, Op::SliceLast { x, start }, &[x]))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_last", sa, sb));
        }
        let (wa, wb) = (self.last_dim(a), self.last_dim(b));
        let y = self
            .value(a)
            .chunks_exact(wa)
            .zip(self.value(b).chunks_exact(wb))
            .flat_map(|(ra, rb)| ra.iter().chain(rb).copied())
            .collect();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = wa + wb;
        Ok(self.push(shape, y, Op::ConcatLast(a, b), &[a, b]))
    }

    /// Stack 2-d tensors with equal width along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, w) = self.rank2("concat_rows", first)?;
        let mut rows = 0;
        let mut y = Vec::new();
        for &p in parts {
            let (r, pw) = self.rank2("concat_rows", p)?;
            if pw != w {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            y.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, w], y, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Per-head scores `[heads, n_q, n_kv]` from `q[n_q, d]`, `k[n_kv, d]`.
    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        let (nq, d) = self.rank2("attn_scores", q)?;
        let (nkv, d2) = self.rank2("attn_scores", k)?;
        if d != d2 || heads == 0 || d % heads != 0 {
            return Err(Error::dim("attn_scores", self.shape(q), self.shape(k)));
        }
        let s = counted!(self, kernels::attn_scores, self.value(q), self.value(k), nq, nkv, d, heads, scale);
        Ok(self.push(vec![heads, nq, nkv], s, Op::AttnScores { q, k, heads, scale }, &[q, k]))
    }

    /// Heads-concatenated context `[n_q, d]` from weights `[heads, n_q, n_kv]`
    /// and values `[n_kv, d]`.
    pub fn attn_context(&mut self, w: Var, v: Var) -> Result<Var> {
        let (nkv, d) = self.rank2("attn_context", v)?;
        let (heads, nq, nkv2) = match *self.shape(w) {
            [h, a, b] => (h, a, b),
            ref s => return Err(Error::dim("attn_context", s, &[0, 0, nkv])),
        };
        if nkv2 != nkv || d % heads != 0 {
            return Err(Error::dim("attn_context", self.shape(w), self.shape(v)));
        }
        let out = counted!(self, kernels::attn_context, self.value(w), self.value(v), nq, nkv, d, heads);
        Ok(self.push(vec![nq, d], out, Op::AttnContext { w, v, heads }, &[w, v]))
    }

    fn conv_dims(&self, op: &'static str, x: Var, kernel_shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
        let (n, c) = self.rank2(op, x)?;
        let (groups, k) = match *kernel_shape {
            [h, k] | [_, h, k] => (h, k),
            ref s => return Err(Error::dim(op, &[n, c], s)),
        };
        if k % 2 == 0 {
            return Err(Error::contract(format!("{op}: kernel size {k} must be odd")));
        }
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(op, &[n, c], kernel_shape));
        }
        Ok((n, c, groups, k))
    }

    /// Depthwise 1-d convolution of `x[n, c]` with a group-shared kernel
    /// `[H, K]`: channel `ch` uses row `ch·H/c`. Zero padding is `(K-1)/2`
    /// on both sides, or `K-1` on the left only when `causal`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, causal: bool) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 2 {
            return Err(Error::dim("depthwise_conv", self.shape(x), &ks));
        }
        let (n, c, groups, k) = self.conv_dims("depthwise_conv", x, &ks)?;
        let y = counted!(self, kernels::depthwise_conv, self.value(x), self.value(kernel), n, c, groups, k, causal);
        Ok(self.push(vec![n, c], y, Op::DepthwiseConv { x, kernel, causal }, &[x, kernel]))
    }

    /// Depthwise convolution with a separate kernel per output position:
    /// `kernels` is `[n, H, K]`.
    pub fn dynamic_conv(&mut self, x: Var, kernels: Var, causal: bool) -> Result<Var> {
        let ks = self.shape(kernels).to_vec();
        if ks.len() != 3 || ks[0] != self.shape(x)[0] {
            return Err(Error::dim("dynamic_conv", self.shape(x), &ks));
        }
        let (n, c, groups, k) = self.conv_dims("dynamic_conv", x, &ks)?;
        let y = counted!(self, kernels::dynamic_conv, self.value(x), self.value(kernels), n, c, groups, k, causal);
        Ok(self.push(vec![n, c], y, Op::DynamicConv { x, kernels, causal }, &[x, kernels]))
    }

    /// Row lookup `table[ids[i]] · scale`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], scale: f64) -> Result<Var> {
        let (vocab, d) = self.rank2("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::contract("embedding of an empty sequence"));
        }
        let t = self.value(table);
        let mut y = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    len: vocab,
                });
            }
            y.extend(t[id * d..(id + 1) * d].iter().map(|x| x * scale));
        }
        Ok(self.push(
            vec![ids.len(), d],
            y,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                scale,
            },
            &[table],
        ))
    }

    /// Elementwise product with constant factors (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::dim("mul_const", self.shape(x), &[factors.len()]));
        }
        let y = self.value(x).iter().zip(&factors).map(|(a, b)| a * b).collect();
        Ok(self.push(self.shape(x).to_vec(), y, Op::MulConst { x, factors }, &[x]))
    }

    /// Label-smoothed cross entropy averaged over non-pad rows:
    /// `(1-ε)·(-log p[target]) + ε·mean_v(-log p[v])`. `None` targets are
    /// padding and excluded.
    pub fn smoothed_ce(&mut self, logits: Var, targets: &[Option<usize>], eps: f64) -> Result<Var> {
        let (n, vocab) = self.rank2("smoothed_ce", logits)?;
        if targets.len() != n {
            return Err(Error::dim("smoothed_ce", self.shape(logits), &[targets.len()]));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::contract(format!("label smoothing {eps} outside [0, 1)")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::contract("all positions are padding"));
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; v.len()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::Index {
                    what: "target id",
                    index: t,
                    len: vocab,
                });
            }
            let row = &v[r * vocab..(r + 1) * vocab];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric("non-finite logits"));
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| math::exp(x - mx)).sum();
            let lse = mx + math::ln(z);
            let mut mean_nll = 0.0;
            for (j, x) in row.iter().enumerate() {
                probs[r * vocab + j] = math::exp(x - lse);
                mean_nll += lse - x;
            }
            mean_nll /= vocab as f64;
            total += (1.0 - eps) * (lse - row[t]) + eps * mean_nll;
        }
        let loss = total / count as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                eps,
                probs,
            },
            &[logits],
        ))
    }
}
