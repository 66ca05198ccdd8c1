//! Forward kernels. Each one takes a [`Tick`] and ticks once per scalar
//! multiply-accumulate it performs; `NoCount` compiles the ticks away.

use alloc::vec;
use alloc::vec::Vec;

pub(crate) trait Tick {
    fn tick(&mut self);
}

pub(crate) struct NoCount;

impl Tick for NoCount {
    #[inline(always)]
    fn tick(&mut self) {}
}

pub(crate) struct Count(pub u64);

impl Tick for Count {
    #[inline(always)]
    fn tick(&mut self) {
        self.0 += 1;
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul<T: Tick>(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, t: &mut T) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
                t.tick();
            }
        }
    }
    c
}

/// `y[rows, d_out] = x[rows, d_in] · w[d_in, d_out] + bias`
pub(crate) fn linear<T: Tick>(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    rows: usize,
    d_in: usize,
    d_out: usize,
    t: &mut T,
) -> Vec<f64> {
    let mut y = matmul(x, w, rows, d_in, d_out, t);
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(d_out) {
            for (yj, bj) in row.iter_mut().zip(b) {
                *yj += bj;
            }
        }
    }
    y
}

/// Per-head scaled scores: `s[h,i,j] = scale · Σ_t q[i,h·dk+t] k[j,h·dk+t]`.
pub(crate) fn attn_scores<T: Tick>(
    q: &[f64],
    k: &[f64],
    nq: usize,
    nkv: usize,
    d: usize,
    heads: usize,
    scale: f64,
    t: &mut T,
) -> Vec<f64> {
    let dk = d / heads;
    let mut s = vec![0.0; heads * nq * nkv];
    for h in 0..heads {
        for i in 0..nq {
            let qi = &q[i * d + h * dk..i * d + (h + 1) * dk];
            for j in 0..nkv {
                let kj = &k[j * d + h * dk..j * d + (h + 1) * dk];
                let mut acc = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    acc += a * b;
                    t.tick();
                }
                s[(h * nq + i) * nkv + j] = acc * scale;
            }
        }
    }
    s
}

/// `out[i,h·dk+t] = Σ_j w[h,i,j] v[j,h·dk+t]`
pub(crate) fn attn_context<T: Tick>(
    w: &[f64],
    v: &[f64],
    nq: usize,
    nkv: usize,
    d: usize,
    heads: usize,
    t: &mut T,
) -> Vec<f64> {
    let dk = d / heads;
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let orow = &mut out[i * d + h * dk..i * d + (h + 1) * dk];
            for j in 0..nkv {
                let wij = w[(h * nq + i) * nkv + j];
                let vj = &v[j * d + h * dk..j * d + (h + 1) * dk];
                for (o, x) in orow.iter_mut().zip(vj) {
                    *o += wij * x;
                    t.tick();
                }
            }
        }
    }
    out
}

/// Left padding of a length-`k` window: `(k-1)/2` centred, `k-1` causal.
pub(crate) fn conv_pad(k: usize, causal: bool) -> usize {
    if causal {
        k - 1
    } else {
        (k - 1) / 2
    }
}

/// Zero-padded copy of `x[n, c]` with `pad` rows in front and `k-1-pad`
/// behind, so every output reads exactly `k` rows.
fn padded(x: &[f64], n: usize, c: usize, k: usize, pad: usize) -> Vec<f64> {
    let mut xp = vec![0.0; (n + k - 1) * c];
    xp[pad * c..(pad + n) * c].copy_from_slice(x);
    xp
}

/// Depthwise 1-d convolution; `kernel_at(t, g)` yields the `k` taps of group
/// `g` at output position `t`. Channel `ch` belongs to group `ch·H/c`.
fn depthwise<T: Tick, F: Fn(usize, usize) -> usize>(
    x: &[f64],
    kernels: &[f64],
    kernel_at: F,
    n: usize,
    c: usize,
    groups: usize,
    k: usize,
    causal: bool,
    t: &mut T,
) -> Vec<f64> {
    let pad = conv_pad(k, causal);
    let xp = padded(x, n, c, k, pad);
    let per = c / groups;
    let mut y = vec![0.0; n * c];
    for pos in 0..n {
        let yrow = &mut y[pos * c..(pos + 1) * c];
        for g in 0..groups {
            let base = kernel_at(pos, g);
            for m in 0..k {
                let w = kernels[base + m];
                let xrow = &xp[(pos + m) * c + g * per..(pos + m) * c + (g + 1) * per];
                for (yo, xi) in yrow[g * per..(g + 1) * per].iter_mut().zip(xrow) {
                    *yo += w * xi;
                    t.tick();
                }
            }
        }
    }
    y
}

pub(crate) fn depthwise_conv<T: Tick>(
    x: &[f64],
    kernel: &[f64],
    n: usize,
    c: usize,
    groups: usize,
    k: usize,
    causal: bool,
    t: &mut T,
) -> Vec<f64> {
    depthwise(x, kernel, |_, g| g * k, n, c, groups, k, causal, t)
}

pub(crate) fn dynamic_conv<T: Tick>(
    x: &[f64],
    kernels: &[f64],
    n: usize,
    c: usize,
    groups: usize,
    k: usize,
    causal: bool,
    t: &mut T,
) -> Vec<f64> {
    depthwise(x, kernels, |pos, g| (pos * groups + g) * k, n, c, groups, k, causal, t)
}
