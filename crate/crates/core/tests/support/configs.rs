//! Random valid model configurations for property tests.

use lsra_core::layers::ConvMode;
use lsra_core::lsra::BlockStyle;
use lsra_core::model::{ModelConfig, ModelTask};
use lsra_core::Rng;

fn pick<T: Copy>(rng: &mut Rng, xs: &[T]) -> T {
    xs[rng.below(xs.len())]
}

/// A small valid config of the given task; every optional feature is drawn.
pub fn random_config(rng: &mut Rng, task: ModelTask) -> ModelConfig {
    let heads = pick(rng, &[1, 2, 4]);
    let d_model = 2 * heads * pick(rng, &[1, 2, 3, 4]);
    let style = pick(rng, &[BlockStyle::Lsra, BlockStyle::Flattened, BlockStyle::BaseBottleneck]);
    let layers = 1 + rng.below(3);
    let kernels: Vec<usize> = (0..layers).map(|_| pick(rng, &[1, 3, 5, 7])).collect();
    let vocab = 4 + rng.below(12);
    let share = task == ModelTask::Seq2seq && rng.below(2) == 0;
    ModelConfig {
        task,
        vocab_src: if task == ModelTask::Seq2seq { if share { vocab } else { 4 + rng.below(12) } } else { 0 },
        vocab_tgt: vocab,
        d_model,
        n_layers_enc: if task == ModelTask::Seq2seq { layers } else { 0 },
        n_layers_dec: layers,
        heads,
        block_style: style,
        kernel_schedule: if style == BlockStyle::Lsra || rng.below(2) == 0 { kernels } else { vec![] },
        conv_mode: pick(rng, &[ConvMode::StaticLightweight, ConvMode::Dynamic]),
        glu_on_conv_input: rng.below(2) == 0,
        d_ff_ratio: pick(rng, &[None, Some(1.0), Some(2.0), Some(0.5)]),
        dropout: 0.0,
        ffn_dropout: None,
        share_embeddings: share,
    }
}
