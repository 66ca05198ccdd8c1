//! Encoder-decoder and causal LM models assembled from [`crate::lsra`]
//! layers, plus decoding, perplexity and attention-map export.

mod attention;
mod config;
mod decode;

use alloc::format;
use alloc::vec::Vec;

use crate::layers::{causal_mask, positional_encoding};
use crate::lsra::{DecoderLayer, EncoderLayer};
use crate::math;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};
use crate::{Error, Result, Rng};

pub use attention::{diagonal_mass, AttentionMap, AttnKind};
pub use config::{ModelConfig, ModelTask};
pub use decode::{beam_search_with, greedy_with, perplexity_with, Hypothesis};

/// Attention weights `[heads, n_q, n_kv]` recorded during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttnRecord {
    pub layer: usize,
    pub kind: AttnKind,
    pub weights: Var,
}

pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    src_embed: Option<ParamId>,
    tgt_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
}

impl Model {
    /// Xavier-uniform projections, zero biases, unit/zero norms and
    /// `N(0, d^-1/2)` embeddings; deterministic in the seed.
    pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = 1.0 / math::sqrt(d as f64);
        let mut params = ParamStore::new();
        let embedding = |store: &mut ParamStore, rng: &mut Rng, name: &str, vocab: usize| {
            store.add(name, Tensor::from_fn(&[vocab, d], |_| rng.normal() * std))
        };
        let seq2seq = config.task == ModelTask::Seq2seq;
        let tgt_embed = embedding(&mut params, rng, "embed.tgt.weight", config.vocab_tgt);
        let src_embed = match (seq2seq, config.share_embeddings) {
            (false, _) => None,
            (true, true) => Some(tgt_embed),
            (true, false) => Some(embedding(&mut params, rng, "embed.src.weight", config.vocab_src)),
        };
        let mut encoder = Vec::with_capacity(config.n_layers_enc);
        for i in 0..config.n_layers_enc {
            encoder.push(EncoderLayer::new(&mut params, rng, &format!("encoder.{i}"), &config.layer_spec(i))?);
        }
        let mut decoder = Vec::with_capacity(config.n_layers_dec);
        for i in 0..config.n_layers_dec {
            decoder.push(DecoderLayer::new(
                &mut params,
                rng,
                &format!("decoder.{i}"),
                &config.layer_spec(i),
                seq2seq,
            )?);
        }
        Ok(Self {
            config: config.clone(),
            params,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
        })
    }

    /// Rebuild the structure for `config` and take values from `params`,
    /// whose manifest must match the one `build` produces.
    pub fn from_params(config: &ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::build(config, &mut Rng::new(0))?;
        model.params.copy_values_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.decoder
    }

    fn embed(&self, s: &mut Session<'_>, table: ParamId, ids: &[usize]) -> Result<Var> {
        let d = self.config.d_model;
        let t = s.param(table);
        let x = s.graph.embedding(t, ids, math::sqrt(d as f64))?;
        let pe = s.graph.constant(positional_encoding(ids.len(), d)?);
        let x = s.graph.add(x, pe)?;
        s.dropout(x, self.config.dropout)
    }

    fn require_seq2seq(&self) -> Result<()> {
        if self.config.task != ModelTask::Seq2seq {
            return Err(Error::contract("operation needs an encoder-decoder model"));
        }
        Ok(())
    }

    /// Encoder output `[n_src, d]`.
    pub fn encode(&self, s: &mut Session<'_>, src: &[usize], trace: &mut Vec<AttnRecord>) -> Result<Var> {
        self.require_seq2seq()?;
        let table = self.src_embed.expect("seq2seq models have a source table");
        let mut x = self.embed(s, table, src)?;
        let drop = self.config.dropout_rates();
        for (layer, enc) in self.encoder.iter().enumerate() {
            let (y, w) = enc.forward(s, x, None, drop)?;
            trace.push(AttnRecord {
                layer,
                kind: AttnKind::SelfEnc,
                weights: w,
            });
            x = y;
        }
        Ok(x)
    }

    /// Decoder hidden states `[n_tgt, d]`; causal in `tgt_in`.
    pub fn decode_hidden(
        &self,
        s: &mut Session<'_>,
        tgt_in: &[usize],
        encoder_out: Option<Var>,
        trace: &mut Vec<AttnRecord>,
    ) -> Result<Var> {
        let mut x = self.embed(s, self.tgt_embed, tgt_in)?;
        let mask = causal_mask(tgt_in.len());
        let drop = self.config.dropout_rates();
        for (layer, dec) in self.decoder.iter().enumerate() {
            let (y, w) = dec.forward(s, x, encoder_out, &mask, drop)?;
            trace.push(AttnRecord {
                layer,
                kind: AttnKind::SelfDec,
                weights: w.self_attn,
            });
            if let Some(c) = w.cross {
                trace.push(AttnRecord {
                    layer,
                    kind: AttnKind::Cross,
                    weights: c,
                });
            }
            x = y;
        }
        Ok(x)
    }

    /// Vocabulary logits through the (tied) target embedding. Excluded from
    /// multiply-accumulate counting, like the embedding lookup.
    pub fn project(&self, s: &mut Session<'_>, hidden: Var) -> Result<Var> {
        s.graph.set_counting_paused(true);
        let t = s.param(self.tgt_embed);
        let tt = s.graph.transpose(t);
        let out = tt.and_then(|tt| s.graph.matmul(hidden, tt));
        s.graph.set_counting_paused(false);
        out
    }

    /// Teacher-forced logits `[n_tgt, vocab_tgt]`.
    pub fn forward_seq2seq(&self, s: &mut Session<'_>, src: &[usize], tgt_in: &[usize]) -> Result<Var> {
        let mut trace = Vec::new();
        let enc = self.encode(s, src, &mut trace)?;
        let h = self.decode_hidden(s, tgt_in, Some(enc), &mut trace)?;
        self.project(s, h)
    }

    /// Next-token logits `[n, vocab_tgt]` of a language model.
    pub fn forward_lm(&self, s: &mut Session<'_>, ids: &[usize]) -> Result<Var> {
        if self.config.task != ModelTask::Lm {
            return Err(Error::contract("operation needs a language model"));
        }
        let h = self.decode_hidden(s, ids, None, &mut Vec::new())?;
        self.project(s, h)
    }

    /// Task-dispatching forward: seq2seq uses `src`, LM ignores it.
    pub fn forward(&self, s: &mut Session<'_>, src: &[usize], tgt_in: &[usize]) -> Result<Var> {
        match self.config.task {
            ModelTask::Seq2seq => self.forward_seq2seq(s, src, tgt_in),
            ModelTask::Lm => self.forward_lm(s, tgt_in),
        }
    }

    /// Inference-mode logits without gradient tracking.
    pub fn logits(&self, src: &[usize], tgt_in: &[usize]) -> Result<Tensor> {
        let mut s = Session::inference(&self.params);
        let out = self.forward(&mut s, src, tgt_in)?;
        Ok(s.graph.tensor(out))
    }

    /// Encoder output as a plain tensor, for reuse across decoding steps.
    pub fn encode_tensor(&self, src: &[usize]) -> Result<Tensor> {
        let mut s = Session::inference(&self.params);
        let enc = self.encode(&mut s, src, &mut Vec::new())?;
        Ok(s.graph.tensor(enc))
    }

    /// Log-probabilities of the token following `prefix`. Padding and
    /// begin-of-sequence are never proposed.
    pub fn next_logprobs(&self, encoder_out: Option<&Tensor>, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut s = Session::inference(&self.params);
        let enc = encoder_out.map(|e| s.graph.constant(e.clone()));
        let h = self.decode_hidden(&mut s, prefix, enc, &mut Vec::new())?;
        let logits = self.project(&mut s, h)?;
        let v = self.config.vocab_tgt;
        let row = &s.graph.value(logits)[(prefix.len() - 1) * v..];
        let mut out = log_softmax(row)?;
        out[crate::tokens::PAD] = f64::NEG_INFINITY;
        out[crate::tokens::BOS] = f64::NEG_INFINITY;
        Ok(out)
    }

    pub fn greedy(&self, src: &[usize], max_len: usize) -> Result<Hypothesis> {
        let enc = self.encoder_context(src)?;
        greedy_with(
            |prefix| self.next_logprobs(enc.as_ref(), prefix),
            crate::tokens::BOS,
            crate::tokens::EOS,
            max_len,
        )
    }

    pub fn beam_search(&self, src: &[usize], beam: usize, lenpen: f64, max_len: usize) -> Result<Hypothesis> {
        let enc = self.encoder_context(src)?;
        beam_search_with(
            |prefix| self.next_logprobs(enc.as_ref(), prefix),
            crate::tokens::BOS,
            crate::tokens::EOS,
            beam,
            lenpen,
            max_len,
        )
    }

    fn encoder_context(&self, src: &[usize]) -> Result<Option<Tensor>> {
        match self.config.task {
            ModelTask::Seq2seq => Ok(Some(self.encode_tensor(src)?)),
            ModelTask::Lm => Ok(None),
        }
    }

    /// `exp(mean next-token NLL)` over `stream`, in windows of
    /// `context_len` inputs.
    pub fn perplexity(&self, stream: &[usize], context_len: usize) -> Result<f64> {
        if self.config.task != ModelTask::Lm {
            return Err(Error::contract("perplexity needs a language model"));
        }
        perplexity_with(stream, context_len, |ids| self.logits(&[], ids))
    }

    /// Head-averaged attention maps of `layer` for every attention site.
    pub fn export_attention(&self, src: &[usize], tgt_in: &[usize], layer: usize) -> Result<Vec<AttentionMap>> {
        let layers = self.encoder.len().max(self.decoder.len());
        if layer >= layers {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                len: layers,
            });
        }
        let mut s = Session::inference(&self.params);
        let mut trace = Vec::new();
        match self.config.task {
            ModelTask::Seq2seq => {
                let enc = self.encode(&mut s, src, &mut trace)?;
                self.decode_hidden(&mut s, tgt_in, Some(enc), &mut trace)?;
            }
            ModelTask::Lm => {
                self.decode_hidden(&mut s, tgt_in, None, &mut trace)?;
            }
        }
        trace
            .iter()
            .filter(|r| r.layer == layer)
            .map(|r| {
                let (q, kv) = match r.kind {
                    AttnKind::SelfEnc => (src, src),
                    AttnKind::SelfDec => (tgt_in, tgt_in),
                    AttnKind::Cross => (tgt_in, src),
                };
                AttentionMap::from_heads(layer, r.kind, &s.graph.tensor(r.weights), q, kv)
            })
            .collect()
    }
}

pub(crate) fn log_softmax(row: &[f64]) -> Result<Vec<f64>> {
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite logits"));
    }
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + math::ln(row.iter().map(|x| math::exp(x - mx)).sum::<f64>());
    Ok(row.iter().map(|x| x - lse).collect())
}
