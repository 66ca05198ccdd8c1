//! Neural building blocks: linear, embedding + positional encoding, GLU,
//! multi-head attention, lightweight/dynamic depthwise convolution, FFN.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result, Rng};

/// Xavier-uniform `[fan_in, fan_out]` matrix.
pub fn xavier_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.uniform_range(-bound, bound))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, d_in, d_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.linear(x, w, b)
    }
}

/// Affine map over the last axis.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    g.linear(x, w, Some(b))
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::from_fn(&[d], |_| 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.graph.layer_norm(x, g, b, self.eps)
    }
}

/// Sinusoidal encoding: `PE[t,2i] = sin(t/10000^(2i/d))`,
/// `PE[t,2i+1] = cos(t/10000^(2i/d))`.
pub fn positional_encoding(n: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) || d == 0 {
        return Err(Error::contract(format!("positional encoding needs an even width, got {d}")));
    }
    let mut pe = Tensor::zeros(&[n, d]);
    let data = pe.data_mut();
    for t in 0..n {
        for i in 0..d / 2 {
            let angle = t as f64 / math::pow(10000.0, (2 * i) as f64 / d as f64);
            data[t * d + 2 * i] = math::sin(angle);
            data[t * d + 2 * i + 1] = math::cos(angle);
        }
    }
    Ok(pe)
}

/// Scaled row lookup; the caller adds positional encoding.
pub fn embed(g: &mut Graph, ids: &[usize], table: Var, scale: f64) -> Result<Var> {
    g.embedding(table, ids, scale)
}

pub fn glu(g: &mut Graph, x: Var) -> Result<Var> {
    g.glu(x)
}

/// `allowed[i * n + j]` is true iff query `i` may attend to key `j <= i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|ij| ij % n <= ij / n).collect()
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub d_model: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::contract(format!("{d_model} channels do not split into {heads} heads")));
        }
        Ok(Self {
            d_model,
            heads,
            q: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model, true),
            k: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model, true),
            v: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model, true),
            o: Linear::new(store, rng, &format!("{name}.o"), d_model, d_model, true),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Scaled dot-product attention over `heads` heads. Returns the projected
/// output `[n_q, d]` and the (pre-dropout) weights `[heads, n_q, n_kv]`.
pub fn multi_head_attention(
    s: &mut Session<'_>,
    query: Var,
    key: Var,
    value: Var,
    p: &AttentionParams,
    mask: Option<&[bool]>,
    weight_dropout: f64,
) -> Result<(Var, Var)> {
    let q = p.q.forward(s, query)?;
    let k = p.k.forward(s, key)?;
    let v = p.v.forward(s, value)?;
    let scale = 1.0 / math::sqrt(p.head_dim() as f64);
    let scores = s.graph.attn_scores(q, k, p.heads, scale)?;
    let weights = match mask {
        Some(m) => s.graph.masked_softmax(scores, m)?,
        None => s.graph.softmax(scores, 2)?,
    };
    let dropped = s.dropout(weights, weight_dropout)?;
    let ctx = s.graph.attn_context(dropped, v)?;
    let out = p.o.forward(s, ctx)?;
    Ok((out, weights))
}

pub fn depthwise_conv1d(g: &mut Graph, x: Var, kernel: Var, causal: bool) -> Result<Var> {
    g.depthwise_conv(x, kernel, causal)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    StaticLightweight,
    Dynamic,
}

#[derive(Clone, Debug)]
pub enum KernelSource {
    /// Raw `[H, K]` kernel, softmax-normalized over `K` on every use.
    Static(ParamId),
    /// Linear map `c -> H·K` predicting the kernel at each position.
    Dynamic(Linear),
}

/// Convolution branch: `out_proj(conv(glu_or_linear(in_proj(x))))`.
#[derive(Clone, Debug)]
pub struct ConvBranchParams {
    pub channels: usize,
    pub kernel_size: usize,
    pub groups: usize,
    pub glu: bool,
    pub causal: bool,
    pub in_proj: Linear,
    pub kernel: KernelSource,
    pub out_proj: Linear,
}

impl ConvBranchParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        kernel_size: usize,
        groups: usize,
        mode: ConvMode,
        glu: bool,
        causal: bool,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::contract(format!("kernel size {kernel_size} must be odd")));
        }
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::contract(format!("{groups} kernel groups do not divide {channels} channels")));
        }
        let in_width = if glu { 2 * channels } else { channels };
        let in_proj = Linear::new(store, rng, &format!("{name}.in_proj"), channels, in_width, true);
        let kernel = match mode {
            ConvMode::StaticLightweight => {
                let w = xavier_uniform(rng, groups, kernel_size);
                KernelSource::Static(store.add(format!("{name}.kernel"), w))
            }
            ConvMode::Dynamic => KernelSource::Dynamic(Linear::new(
                store,
                rng,
                &format!("{name}.kernel_predictor"),
                channels,
                groups * kernel_size,
                true,
            )),
        };
        let out_proj = Linear::new(store, rng, &format!("{name}.out_proj"), channels, channels, true);
        Ok(Self {
            channels,
            kernel_size,
            groups,
            glu,
            causal,
            in_proj,
            kernel,
            out_proj,
        })
    }

    pub fn mode(&self) -> ConvMode {
        match self.kernel {
            KernelSource::Static(_) => ConvMode::StaticLightweight,
            KernelSource::Dynamic(_) => ConvMode::Dynamic,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let mut h = self.in_proj.forward(s, x)?;
        if self.glu {
            h = s.graph.glu(h)?;
        }
        let h = match self.kernel {
            KernelSource::Static(_) => lightweight_conv(s, h, self)?,
            KernelSource::Dynamic(_) => dynamic_conv(s, h, self)?,
        };
        self.out_proj.forward(s, h)
    }
}

/// Depthwise convolution with softmax-normalized, group-shared static
/// kernels.
pub fn lightweight_conv(s: &mut Session<'_>, x: Var, p: &ConvBranchParams) -> Result<Var> {
    let KernelSource::Static(raw) = p.kernel else {
        return Err(Error::contract("lightweight_conv needs a static kernel"));
    };
    let raw = s.param(raw);
    let kernel = s.graph.softmax(raw, 1)?;
    s.graph.depthwise_conv(x, kernel, p.causal)
}

/// Depthwise convolution whose `[H, K]` kernel is predicted from `x[t]` at
/// each position and softmax-normalized over `K`.
pub fn dynamic_conv(s: &mut Session<'_>, x: Var, p: &ConvBranchParams) -> Result<Var> {
    let KernelSource::Dynamic(pred) = &p.kernel else {
        return Err(Error::contract("dynamic_conv needs a kernel predictor"));
    };
    let n = s.graph.shape(x)[0];
    let logits = pred.forward(s, x)?;
    let logits = s.graph.reshape(logits, &[n, p.groups, p.kernel_size])?;
    let kernels = s.graph.softmax(logits, 2)?;
    s.graph.dynamic_conv(x, kernels, p.causal)
}

/// Position-wise feed-forward: `W2·relu(W1·x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub w1: Linear,
    pub w2: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, d_ff: usize) -> Self {
        Self {
            w1: Linear::new(store, rng, &format!("{name}.fc1"), d, d_ff, true),
            w2: Linear::new(store, rng, &format!("{name}.fc2"), d_ff, d, true),
        }
    }

    /// `dropout` is applied after the activation.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.w1.forward(s, x)?;
        let h = s.graph.relu(h);
        let h = s.dropout(h, dropout)?;
        self.w2.forward(s, h)
    }
}

pub fn ffn(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.relu(h);
    g.linear(h, w2, Some(b2))
}
