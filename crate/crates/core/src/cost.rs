//! Exact Mult-Adds and parameter accounting.
//!
//! One Mult-Add is one multiply plus one accumulate. Bias additions,
//! softmax, normalization, activations, the embedding lookup and the
//! vocabulary projection are not counted; embedding tables are reported
//! separately from the parameter total. Every closed form here equals the
//! multiply-accumulate count of the instrumented forward pass
//! ([`count_forward_madds`]).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::layers::ConvMode;
use crate::lsra::{BlockStyle, LayerSpec};
use crate::model::{Model, ModelConfig, ModelTask};
use crate::params::Session;
use crate::tensor::Graph;
use crate::{tokens, Error, Result, Rng};

/// Sequence length at which the mobile constraint is defined.
pub const MOBILE_SEQ_LEN: usize = 30;
pub const MOBILE_MAX_MULT_ADDS: u64 = 500_000_000;
pub const MOBILE_MAX_PARAMS: u64 = 10_000_000;

/// Attention with `n_q` queries over `n_kv` keys at width `d`: four
/// projections plus the score and context products.
pub fn cross_attention_madds(n_q: u64, n_kv: u64, d: u64) -> u64 {
    2 * n_q * d * d + 2 * n_kv * d * d + 2 * n_q * n_kv * d
}

/// Self-attention, exact: `4Nd² + 2N²d`.
pub fn attention_madds(n: u64, d: u64) -> u64 {
    cross_attention_madds(n, n, d)
}

/// Self-attention with a single `N²d` term, `4Nd² + N²d`, for comparison
/// with published asymptotic figures.
pub fn attention_madds_asymptotic(n: u64, d: u64) -> u64 {
    4 * n * d * d + n * n * d
}

/// `2·N·d·d_ff`; the standard `8Nd²` is the `d_ff = 4d` case.
pub fn ffn_madds(n: u64, d: u64, d_ff: u64) -> u64 {
    2 * n * d * d_ff
}

/// Input projection (doubled with GLU), optional kernel prediction,
/// depthwise taps and output projection of a conv branch over `c`
/// channels.
pub fn conv_branch_madds(n: u64, c: u64, k: u64, mode: ConvMode, groups: u64, glu: bool) -> u64 {
    let in_width = if glu { 2 * c } else { c };
    let predictor = match mode {
        ConvMode::StaticLightweight => 0,
        ConvMode::Dynamic => n * c * groups * k,
    };
    n * c * in_width + predictor + n * c * k + n * c * c
}

pub fn attention_params(d: u64) -> u64 {
    4 * (d * d + d)
}

pub fn ffn_params(d: u64, d_ff: u64) -> u64 {
    2 * d * d_ff + d_ff + d
}

pub fn conv_branch_params(c: u64, k: u64, mode: ConvMode, groups: u64, glu: bool) -> u64 {
    let in_width = if glu { 2 * c } else { c };
    let kernel = match mode {
        ConvMode::StaticLightweight => groups * k,
        ConvMode::Dynamic => c * groups * k + groups * k,
    };
    c * in_width + in_width + kernel + c * c + c
}

pub fn layer_norm_params(d: u64) -> u64 {
    2 * d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Attention,
    Ffn,
    Conv,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub component: String,
    pub category: Category,
    pub mult_adds: u64,
    pub params: u64,
}

/// Fractions of the total Mult-Adds per category.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub attention: f64,
    pub ffn: f64,
    pub conv: f64,
    pub other: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_src: usize,
    pub n_tgt: usize,
    pub entries: Vec<CostEntry>,
    pub total_mult_adds: u64,
    /// Total with one `N_q·N_kv·d` term per attention instead of two.
    pub asymptotic_mult_adds: u64,
    /// Parameters excluding embedding tables.
    pub total_params: u64,
    pub embedding_params: u64,
    pub shares: Shares,
}

impl CostReport {
    fn from_entries(n_src: usize, n_tgt: usize, entries: Vec<CostEntry>, score_terms: u64, embedding_params: u64) -> Self {
        let total_mult_adds: u64 = entries.iter().map(|e| e.mult_adds).sum();
        let total_params = entries.iter().map(|e| e.params).sum();
        let by = |c: Category| entries.iter().filter(|e| e.category == c).map(|e| e.mult_adds).sum::<u64>();
        let share = |c| if total_mult_adds == 0 { 0.0 } else { by(c) as f64 / total_mult_adds as f64 };
        let shares = Shares {
            attention: share(Category::Attention),
            ffn: share(Category::Ffn),
            conv: share(Category::Conv),
            other: share(Category::Other),
        };
        Self {
            n_src,
            n_tgt,
            entries,
            total_mult_adds,
            asymptotic_mult_adds: total_mult_adds - score_terms,
            total_params,
            embedding_params,
            shares,
        }
    }

    pub fn category_mult_adds(&self, c: Category) -> u64 {
        self.entries.iter().filter(|e| e.category == c).map(|e| e.mult_adds).sum()
    }
}

struct Walker {
    entries: Vec<CostEntry>,
    score_terms: u64,
}

impl Walker {
    fn push(&mut self, component: String, category: Category, mult_adds: u64, params: u64) {
        self.entries.push(CostEntry {
            component,
            category,
            mult_adds,
            params,
        });
    }

    fn attention(&mut self, path: String, n_q: u64, n_kv: u64, d: u64) {
        self.score_terms += n_q * n_kv * d;
        self.push(path, Category::Attention, cross_attention_madds(n_q, n_kv, d), attention_params(d));
    }

    fn norm(&mut self, path: String, d: u64) {
        self.push(path, Category::Other, 0, layer_norm_params(d));
    }

    /// Self-context sublayer (attention or LSRA branches) and its norm.
    fn mixer(&mut self, prefix: &str, spec: &LayerSpec, n: u64) {
        let d = spec.d_model as u64;
        match spec.style {
            BlockStyle::BaseBottleneck | BlockStyle::Flattened => self.attention(format!("{prefix}.self_attn"), n, n, d),
            BlockStyle::Lsra => {
                let c = d / 2;
                self.attention(format!("{prefix}.lsra.attn"), n, n, c);
                let (k, h) = (spec.kernel_size as u64, spec.heads as u64);
                self.push(
                    format!("{prefix}.lsra.conv"),
                    Category::Conv,
                    conv_branch_madds(n, c, k, spec.conv_mode, h, spec.glu),
                    conv_branch_params(c, k, spec.conv_mode, h, spec.glu),
                );
            }
        }
        self.norm(format!("{prefix}.norm1"), d);
    }

    fn ffn(&mut self, prefix: &str, norm: &str, spec: &LayerSpec, n: u64) {
        let (d, d_ff) = (spec.d_model as u64, spec.d_ff as u64);
        self.push(format!("{prefix}.ffn"), Category::Ffn, ffn_madds(n, d, d_ff), ffn_params(d, d_ff));
        self.norm(format!("{prefix}.{norm}"), d);
    }

    fn encoder_layer(&mut self, prefix: &str, spec: &LayerSpec, n: u64) {
        self.mixer(prefix, spec, n);
        self.ffn(prefix, "norm2", spec, n);
    }

    fn decoder_layer(&mut self, prefix: &str, spec: &LayerSpec, n_tgt: u64, n_src: Option<u64>) {
        self.mixer(prefix, spec, n_tgt);
        if let Some(n_src) = n_src {
            let d = spec.d_model as u64;
            self.attention(format!("{prefix}.cross_attn"), n_tgt, n_src, d);
            self.norm(format!("{prefix}.norm_cross"), d);
        }
        self.ffn(prefix, "norm_ffn", spec, n_tgt);
    }
}

/// Walk the architecture and sum the exact per-component counts. For a
/// language model `n_src` is ignored.
pub fn profile(config: &ModelConfig, n_src: usize, n_tgt: usize) -> Result<CostReport> {
    config.validate()?;
    let seq2seq = config.task == ModelTask::Seq2seq;
    if n_tgt == 0 || (seq2seq && n_src == 0) {
        return Err(Error::contract("sequence lengths must be at least 1"));
    }
    let mut w = Walker {
        entries: Vec::new(),
        score_terms: 0,
    };
    for i in 0..config.n_layers_enc {
        w.encoder_layer(&format!("encoder.{i}"), &config.layer_spec(i), n_src as u64);
    }
    for i in 0..config.n_layers_dec {
        let src = seq2seq.then_some(n_src as u64);
        w.decoder_layer(&format!("decoder.{i}"), &config.layer_spec(i), n_tgt as u64, src);
    }
    let d = config.d_model as u64;
    let mut embedding_params = config.vocab_tgt as u64 * d;
    if seq2seq && !config.share_embeddings {
        embedding_params += config.vocab_src as u64 * d;
    }
    let n_src = if seq2seq { n_src } else { 0 };
    Ok(CostReport::from_entries(n_src, n_tgt, w.entries, w.score_terms, embedding_params))
}

/// Cost of a single encoder-style block (self-context sublayer + FFN) at
/// length `n`.
pub fn block_report(spec: &LayerSpec, n: usize) -> CostReport {
    let mut w = Walker {
        entries: Vec::new(),
        score_terms: 0,
    };
    w.encoder_layer("block", spec, n as u64);
    CostReport::from_entries(n, n, w.entries, w.score_terms, 0)
}

/// Run a real forward pass with multiply-accumulate counting enabled on
/// random token ids of the given lengths and return the count.
pub fn count_forward_madds(model: &Model, n_src: usize, n_tgt: usize, rng: &mut Rng) -> Result<u64> {
    let c = model.config();
    let draw = |rng: &mut Rng, n: usize, vocab: usize| -> Vec<usize> {
        (0..n).map(|_| tokens::FIRST_CONTENT + rng.below(vocab - tokens::FIRST_CONTENT)).collect()
    };
    let src = if c.task == ModelTask::Seq2seq { draw(rng, n_src, c.vocab_src) } else { vec![] };
    let tgt = draw(rng, n_tgt, c.vocab_tgt);
    let mut s = Session::with_graph(model.params(), Graph::with_mac_counter(), false, None);
    model.forward(&mut s, &src, &tgt)?;
    Ok(s.graph.macs().unwrap_or(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub pass: bool,
    pub reasons: Vec<String>,
}

/// Mobile constraint on raw counts: strictly under 500M Mult-Adds and
/// strictly under 10M parameters.
pub fn gate_counts(mult_adds: u64, params: u64) -> GateResult {
    let mut reasons = Vec::new();
    if mult_adds >= MOBILE_MAX_MULT_ADDS {
        reasons.push(format!(
            "mult-adds {mult_adds} exceed the {MOBILE_MAX_MULT_ADDS} bound by {}",
            mult_adds - MOBILE_MAX_MULT_ADDS + 1
        ));
    }
    if params >= MOBILE_MAX_PARAMS {
        reasons.push(format!(
            "params {params} exceed the {MOBILE_MAX_PARAMS} bound by {}",
            params - MOBILE_MAX_PARAMS + 1
        ));
    }
    GateResult {
        pass: reasons.is_empty(),
        reasons,
    }
}

/// Mobile gate on a report computed at 30 source and 30 target tokens.
pub fn mobile_gate(report: &CostReport) -> Result<GateResult> {
    let src_ok = report.n_src == MOBILE_SEQ_LEN || report.n_src == 0;
    if !src_ok || report.n_tgt != MOBILE_SEQ_LEN {
        return Err(Error::contract(format!(
            "mobile gate is defined at {MOBILE_SEQ_LEN} tokens, report uses {}/{}",
            report.n_src, report.n_tgt
        )));
    }
    Ok(gate_counts(report.total_mult_adds, report.total_params))
}

/// Mult-Adds budget per sentence for a device of `flops_per_second` that
/// must sustain `sentences_per_second` (two FLOPs per Mult-Add).
pub fn mult_adds_budget(flops_per_second: f64, sentences_per_second: f64) -> u64 {
    (flops_per_second / sentences_per_second / 2.0) as u64
}
