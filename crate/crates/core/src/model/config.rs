use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::layers::ConvMode;
use crate::lsra::{BlockStyle, Dropout, LayerSpec};
use crate::tokens;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTask {
    Seq2seq,
    Lm,
}

/// Full architectural description of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: ModelTask,
    #[serde(default)]
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub d_model: usize,
    #[serde(default)]
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    /// Heads per attention module (and kernel groups per conv branch).
    pub heads: usize,
    pub block_style: BlockStyle,
    /// One odd kernel size per layer; layer `i` of the encoder and of the
    /// decoder both use entry `i`.
    #[serde(default)]
    pub kernel_schedule: Vec<usize>,
    #[serde(default = "default_conv_mode")]
    pub conv_mode: ConvMode,
    #[serde(default)]
    pub glu_on_conv_input: bool,
    /// FFN width as a multiple of `d_model`; defaults to 4 for the base
    /// style and 1 otherwise.
    #[serde(default)]
    pub d_ff_ratio: Option<f64>,
    #[serde(default)]
    pub dropout: f64,
    /// Defaults to `dropout` for the base style and `dropout / 2` for the
    /// flattened and LSRA styles; other values are rejected for those.
    #[serde(default)]
    pub ffn_dropout: Option<f64>,
    #[serde(default)]
    pub share_embeddings: bool,
}

fn default_conv_mode() -> ConvMode {
    ConvMode::Dynamic
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let min_vocab = tokens::FIRST_CONTENT + 1;
        if self.vocab_tgt < min_vocab {
            return Err(Error::config("vocab_tgt", format!("must be at least {min_vocab}")));
        }
        if self.heads == 0 {
            return Err(Error::config("heads", "must be positive"));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2 * self.heads) {
            return Err(Error::config(
                "d_model",
                format!("{} is not divisible by 2 x heads = {}", self.d_model, 2 * self.heads),
            ));
        }
        if self.n_layers_dec == 0 {
            return Err(Error::config("n_layers_dec", "must be positive"));
        }
        match self.task {
            ModelTask::Seq2seq => {
                if self.n_layers_enc == 0 {
                    return Err(Error::config("n_layers_enc", "must be positive for seq2seq"));
                }
                if self.vocab_src < min_vocab {
                    return Err(Error::config("vocab_src", format!("must be at least {min_vocab}")));
                }
                if self.share_embeddings && self.vocab_src != self.vocab_tgt {
                    return Err(Error::config("share_embeddings", "needs vocab_src == vocab_tgt"));
                }
            }
            ModelTask::Lm => {
                if self.n_layers_enc != 0 {
                    return Err(Error::config("n_layers_enc", "must be 0 for a language model"));
                }
            }
        }
        if self.block_style == BlockStyle::Lsra || !self.kernel_schedule.is_empty() {
            for &n in [self.n_layers_enc, self.n_layers_dec].iter().filter(|&&n| n > 0) {
                if self.kernel_schedule.len() != n {
                    return Err(Error::config(
                        "kernel_schedule",
                        format!("has {} entries for {n} layers", self.kernel_schedule.len()),
                    ));
                }
            }
        }
        if let Some(k) = self.kernel_schedule.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::config("kernel_schedule", format!("kernel size {k} is not odd")));
        }
        let ratio = self.ffn_ratio();
        let d_ff = ratio * self.d_model as f64;
        if !(ratio > 0.0) || libm::trunc(d_ff) != d_ff || d_ff < 1.0 {
            return Err(Error::config("d_ff_ratio", format!("{ratio} x {} is not a positive integer", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if let Some(f) = self.ffn_dropout {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::config("ffn_dropout", "must be in [0, 1)"));
            }
            if self.block_style != BlockStyle::BaseBottleneck && f != self.dropout / 2.0 {
                return Err(Error::config("ffn_dropout", "must be dropout / 2 for flattened and lsra blocks"));
            }
        }
        Ok(())
    }

    pub fn ffn_ratio(&self) -> f64 {
        self.d_ff_ratio.unwrap_or_else(|| self.block_style.default_ffn_ratio())
    }

    pub fn d_ff(&self) -> usize {
        (self.ffn_ratio() * self.d_model as f64) as usize
    }

    pub fn ffn_dropout(&self) -> f64 {
        self.ffn_dropout.unwrap_or(match self.block_style {
            BlockStyle::BaseBottleneck => self.dropout,
            BlockStyle::Flattened | BlockStyle::Lsra => self.dropout / 2.0,
        })
    }

    pub fn dropout_rates(&self) -> Dropout {
        Dropout {
            residual: self.dropout,
            ffn: self.ffn_dropout(),
        }
    }

    pub fn kernel_size(&self, layer: usize) -> usize {
        self.kernel_schedule.get(layer).copied().unwrap_or(1)
    }

    pub fn layer_spec(&self, layer: usize) -> LayerSpec {
        LayerSpec {
            d_model: self.d_model,
            heads: self.heads,
            style: self.block_style,
            d_ff: self.d_ff(),
            kernel_size: self.kernel_size(layer),
            conv_mode: self.conv_mode,
            glu: self.glu_on_conv_input,
        }
    }

    /// Small LSRA encoder-decoder used by tests and the desk-scale tasks.
    pub fn small_lsra(vocab: usize, d_model: usize, layers: usize, kernels: &[usize]) -> Self {
        Self {
            task: ModelTask::Seq2seq,
            vocab_src: vocab,
            vocab_tgt: vocab,
            d_model,
            n_layers_enc: layers,
            n_layers_dec: layers,
            heads: 4,
            block_style: BlockStyle::Lsra,
            kernel_schedule: kernels.to_vec(),
            conv_mode: ConvMode::Dynamic,
            glu_on_conv_input: false,
            d_ff_ratio: None,
            dropout: 0.0,
            ffn_dropout: None,
            share_embeddings: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_width_not_divisible_by_twice_heads() {
        let mut c = ModelConfig::small_lsra(16, 510, 1, &[3]);
        c.heads = 4;
        assert!(matches!(c.validate(), Err(Error::Config { field: "d_model", .. })));
        c.d_model = 512;
        c.validate().unwrap();
    }

    #[test]
    fn rejects_even_kernel_and_bad_schedule_length() {
        let mut c = ModelConfig::small_lsra(16, 16, 2, &[3, 4]);
        assert!(matches!(c.validate(), Err(Error::Config { field: "kernel_schedule", .. })));
        c.kernel_schedule = alloc::vec![3];
        assert!(matches!(c.validate(), Err(Error::Config { field: "kernel_schedule", .. })));
    }

    #[test]
    fn ffn_dropout_is_halved_for_flattened_styles() {
        let mut c = ModelConfig::small_lsra(16, 16, 1, &[3]);
        c.dropout = 0.3;
        assert_eq!(c.ffn_dropout(), 0.15);
        c.ffn_dropout = Some(0.3);
        assert!(c.validate().is_err());
        c.block_style = BlockStyle::BaseBottleneck;
        c.validate().unwrap();
        assert_eq!(c.d_ff(), 64);
    }
}
