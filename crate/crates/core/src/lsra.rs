//! Block-level assembly: the two-branch LSRA block, the flattened block and
//! post-norm encoder/decoder layers built from them.
//!
//! Every sublayer is `norm(x + dropout(f(x)))`.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::layers::{multi_head_attention, AttentionParams, ConvBranchParams, ConvMode, Ffn, LayerNorm};
use crate::params::{ParamStore, Session};
use crate::tensor::Var;
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    /// Standard block: full-width attention, FFN expanded 4x.
    BaseBottleneck,
    /// Full-width attention, FFN without expansion.
    Flattened,
    /// Flattened channel policy with the self-attention replaced by the
    /// attention/convolution two-branch block.
    Lsra,
}

impl BlockStyle {
    /// Default FFN expansion for the style.
    pub fn default_ffn_ratio(self) -> f64 {
        match self {
            BlockStyle::BaseBottleneck => 4.0,
            BlockStyle::Flattened | BlockStyle::Lsra => 1.0,
        }
    }
}

/// Shape of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerSpec {
    pub d_model: usize,
    pub heads: usize,
    pub style: BlockStyle,
    pub d_ff: usize,
    pub kernel_size: usize,
    pub conv_mode: ConvMode,
    pub glu: bool,
}

/// Dropout rates used by a forward pass; all zero at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dropout {
    /// Sublayer outputs, embeddings and attention weights.
    pub residual: f64,
    /// Inside the FFN after the activation.
    pub ffn: f64,
}

/// Two halves of the channel axis: attention on the left, convolution on
/// the right.
#[derive(Clone, Debug)]
pub struct LsraBlockParams {
    pub d_model: usize,
    pub attention: AttentionParams,
    pub conv: ConvBranchParams,
}

/// The self-context part of a layer.
#[derive(Clone, Debug)]
pub enum Mixer {
    Attention(AttentionParams),
    Lsra(LsraBlockParams),
}

impl Mixer {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, spec: &LayerSpec, causal: bool) -> Result<Self> {
        match spec.style {
            BlockStyle::BaseBottleneck | BlockStyle::Flattened => Ok(Mixer::Attention(AttentionParams::new(
                store,
                rng,
                &format!("{name}.self_attn"),
                spec.d_model,
                spec.heads,
            )?)),
            BlockStyle::Lsra => {
                if !spec.d_model.is_multiple_of(2) {
                    return Err(Error::contract(format!("LSRA needs an even width, got {}", spec.d_model)));
                }
                let half = spec.d_model / 2;
                let attention = AttentionParams::new(store, rng, &format!("{name}.lsra.attn"), half, spec.heads)?;
                let conv = ConvBranchParams::new(
                    store,
                    rng,
                    &format!("{name}.lsra.conv"),
                    half,
                    spec.kernel_size,
                    spec.heads,
                    spec.conv_mode,
                    spec.glu,
                    causal,
                )?;
                Ok(Mixer::Lsra(LsraBlockParams {
                    d_model: spec.d_model,
                    attention,
                    conv,
                }))
            }
        }
    }

    /// Returns the mixed output and the attention weights of the attention
    /// (branch).
    pub fn forward(&self, s: &mut Session<'_>, x: Var, mask: Option<&[bool]>, p_drop: f64) -> Result<(Var, Var)> {
        match self {
            Mixer::Attention(a) => multi_head_attention(s, x, x, x, a, mask, p_drop),
            Mixer::Lsra(p) => lsra_branches(s, x, p, mask, p_drop),
        }
    }
}

/// Channel split, attention on the left half, convolution on the right
/// half, concatenated back.
pub fn lsra_branches(
    s: &mut Session<'_>,
    x: Var,
    p: &LsraBlockParams,
    mask: Option<&[bool]>,
    p_drop: f64,
) -> Result<(Var, Var)> {
    let d = *s.graph.shape(x).last().unwrap();
    if !d.is_multiple_of(2) || d != p.d_model {
        return Err(Error::contract(format!("LSRA block expects {} channels, got {d}", p.d_model)));
    }
    let half = d / 2;
    let left_in = s.graph.slice_last(x, 0, half)?;
    let right_in = s.graph.slice_last(x, half, half)?;
    let (left, weights) = multi_head_attention(s, left_in, left_in, left_in, &p.attention, mask, p_drop)?;
    let right = p.conv.forward(s, right_in)?;
    Ok((s.graph.concat_last(left, right)?, weights))
}

fn residual_norm(s: &mut Session<'_>, x: Var, y: Var, norm: &LayerNorm, p_drop: f64) -> Result<Var> {
    let y = s.dropout(y, p_drop)?;
    let sum = s.graph.add(x, y)?;
    norm.forward(s, sum)
}

/// Self-context sublayer followed by the FFN sublayer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub style: BlockStyle,
    pub mixer: Mixer,
    pub norm1: LayerNorm,
    pub ffn: Ffn,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, spec: &LayerSpec) -> Result<Self> {
        Ok(Self {
            style: spec.style,
            mixer: Mixer::new(store, rng, name, spec, false)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), spec.d_model),
            ffn: Ffn::new(store, rng, &format!("{name}.ffn"), spec.d_model, spec.d_ff),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), spec.d_model),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, mask: Option<&[bool]>, drop: Dropout) -> Result<(Var, Var)> {
        let (mixed, attn) = self.mixer.forward(s, x, mask, drop.residual)?;
        let h = residual_norm(s, x, mixed, &self.norm1, drop.residual)?;
        let f = self.ffn.forward(s, h, drop.ffn)?;
        Ok((residual_norm(s, h, f, &self.norm2, drop.residual)?, attn))
    }
}

/// LSRA block: two-branch self-context sublayer then the FFN that mixes the
/// halves. Returns the output and the attention-branch weights.
pub fn lsra_block(s: &mut Session<'_>, x: Var, layer: &EncoderLayer, mask: Option<&[bool]>) -> Result<(Var, Var)> {
    if !matches!(layer.mixer, Mixer::Lsra(_)) {
        return Err(Error::contract("lsra_block needs an LSRA layer"));
    }
    layer.forward(s, x, mask, Dropout::default())
}

/// Full-width attention then a non-expanding FFN.
pub fn flattened_block(s: &mut Session<'_>, x: Var, layer: &EncoderLayer, mask: Option<&[bool]>) -> Result<Var> {
    if !matches!(layer.mixer, Mixer::Attention(_)) {
        return Err(Error::contract("flattened_block needs an attention layer"));
    }
    Ok(layer.forward(s, x, mask, Dropout::default())?.0)
}

/// Attention weights produced by one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct DecoderAttn {
    pub self_attn: Var,
    pub cross: Option<Var>,
}

/// Causal self-context sublayer, optional full-width cross-attention, FFN.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub style: BlockStyle,
    pub mixer: Mixer,
    pub norm1: LayerNorm,
    pub cross: Option<(AttentionParams, LayerNorm)>,
    pub ffn: Ffn,
    pub norm_ffn: LayerNorm,
}

impl DecoderLayer {
    /// `with_cross` is false for decoder-only language models.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, spec: &LayerSpec, with_cross: bool) -> Result<Self> {
        let mixer = Mixer::new(store, rng, name, spec, true)?;
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), spec.d_model);
        let cross = if with_cross {
            Some((
                AttentionParams::new(store, rng, &format!("{name}.cross_attn"), spec.d_model, spec.heads)?,
                LayerNorm::new(store, &format!("{name}.norm_cross"), spec.d_model),
            ))
        } else {
            None
        };
        Ok(Self {
            style: spec.style,
            mixer,
            norm1,
            cross,
            ffn: Ffn::new(store, rng, &format!("{name}.ffn"), spec.d_model, spec.d_ff),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), spec.d_model),
        })
    }

    /// `self_mask` must be causal for autoregressive use; the convolution
    /// branch is causal by construction.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        x: Var,
        encoder_out: Option<Var>,
        self_mask: &[bool],
        drop: Dropout,
    ) -> Result<(Var, DecoderAttn)> {
        let (mixed, self_attn) = self.mixer.forward(s, x, Some(self_mask), drop.residual)?;
        let mut h = residual_norm(s, x, mixed, &self.norm1, drop.residual)?;
        let mut cross = None;
        if let Some((attn, norm)) = &self.cross {
            let enc = encoder_out.ok_or_else(|| Error::contract("decoder layer needs the encoder output"))?;
            let (c, w) = multi_head_attention(s, h, enc, enc, attn, None, drop.residual)?;
            h = residual_norm(s, h, c, norm, drop.residual)?;
            cross = Some(w);
        }
        let f = self.ffn.forward(s, h, drop.ffn)?;
        let y = residual_norm(s, h, f, &self.norm_ffn, drop.residual)?;
        Ok((y, DecoderAttn { self_attn, cross }))
    }
}
