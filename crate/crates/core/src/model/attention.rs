use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::tokens;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    SelfEnc,
    SelfDec,
    Cross,
}

/// Head-averaged attention weights of one attention site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub kind: AttnKind,
    pub tokens_q: Vec<String>,
    pub tokens_kv: Vec<String>,
    /// Row-major `[tokens_q.len(), tokens_kv.len()]`.
    pub weights: Vec<f64>,
}

pub(crate) fn token_label(id: usize) -> String {
    match id {
        tokens::PAD => "<pad>".to_string(),
        tokens::BOS => "<bos>".to_string(),
        tokens::EOS => "<eos>".to_string(),
        _ => id.to_string(),
    }
}

impl AttentionMap {
    /// Average `[heads, n_q, n_kv]` weights over heads.
    pub fn from_heads(layer: usize, kind: AttnKind, w: &Tensor, q: &[usize], kv: &[usize]) -> Result<Self> {
        let &[heads, nq, nkv] = w.shape() else {
            return Err(Error::dim("attention map", w.shape(), &[0, q.len(), kv.len()]));
        };
        if nq != q.len() || nkv != kv.len() {
            return Err(Error::dim("attention map", w.shape(), &[heads, q.len(), kv.len()]));
        }
        let mut weights = vec![0.0; nq * nkv];
        for plane in w.data().chunks_exact(nq * nkv) {
            for (o, x) in weights.iter_mut().zip(plane) {
                *o += x;
            }
        }
        weights.iter_mut().for_each(|x| *x /= heads as f64);
        Ok(Self {
            layer,
            kind,
            tokens_q: q.iter().map(|&t| token_label(t)).collect(),
            tokens_kv: kv.iter().map(|&t| token_label(t)).collect(),
            weights,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens_q.len()
    }

    pub fn cols(&self) -> usize {
        self.tokens_kv.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols() + j]
    }
}

/// Mean over rows of the probability mass within `|i - j| <= bandwidth`.
pub fn diagonal_mass(map: &AttentionMap, bandwidth: usize) -> Result<f64> {
    let n = map.rows();
    if n != map.cols() {
        return Err(Error::contract(format!("diagonal mass needs a square map, got {n}x{}", map.cols())));
    }
    let mut total = 0.0;
    for i in 0..n {
        let lo = i.saturating_sub(bandwidth);
        let hi = (i + bandwidth).min(n - 1);
        total += (lo..=hi).map(|j| map.at(i, j)).sum::<f64>();
    }
    Ok(total / n as f64)
}
