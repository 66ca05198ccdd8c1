//! Desk-scale training: synthetic tasks, label-smoothed loss, learning-rate
//! schedules, Adam and token-weighted gradient accumulation.

mod data;
mod optim;
mod schedule;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelTask};
use crate::params::Session;
use crate::tensor::Tensor;
use crate::tokens::PAD;
use crate::{math, Error, Result, Rng};

pub use data::{Batch, Example, TaskGen, TaskKind, GRAMMAR_PREFERRED};
pub use optim::{Adam, AdamConfig};
pub use schedule::{LrSchedule, ScheduleKind};

/// Largest batch size in target tokens.
pub const MAX_BATCH_TOKENS: usize = 4096;

/// Training hyperparameters. Dropout rates belong to the model config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub vocab: usize,
    /// Content tokens per sequence, excluding BOS/EOS.
    #[serde(default = "one")]
    pub min_len: usize,
    pub max_len: usize,
    /// Target tokens per micro-batch.
    pub batch_tokens: usize,
    /// Maximum number of updates.
    pub steps: usize,
    /// Micro-batches per update.
    #[serde(default = "one")]
    pub accumulation: usize,
    pub schedule: ScheduleKind,
    pub lr_peak: f64,
    #[serde(default = "default_lr_start")]
    pub lr_start: f64,
    #[serde(default = "default_lr_floor")]
    pub lr_floor: f64,
    pub warmup_steps: usize,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Evaluate every this many updates; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// Fixed held-out sequences used for evaluation.
    #[serde(default = "default_eval_sequences")]
    pub eval_sequences: usize,
    /// Stop once teacher-forced accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

fn one() -> usize {
    1
}

fn default_lr_start() -> f64 {
    1e-7
}

fn default_lr_floor() -> f64 {
    1e-5
}

fn default_smoothing() -> f64 {
    0.1
}

fn default_eval_sequences() -> usize {
    64
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        TaskGen::new(self.task, self.vocab, self.min_len, self.max_len, self.seed)?;
        if self.batch_tokens == 0 || self.batch_tokens > MAX_BATCH_TOKENS {
            return Err(Error::config("batch_tokens", format!("must be in [1, {MAX_BATCH_TOKENS}]")));
        }
        if self.batch_tokens < self.max_len + 1 {
            return Err(Error::config("batch_tokens", "must fit one sequence of max_len"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.accumulation == 0 {
            return Err(Error::config("accumulation", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must be in [0, 1)"));
        }
        if self.eval_sequences == 0 {
            return Err(Error::config("eval_sequences", "must be at least 1"));
        }
        if let Some(a) = self.target_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config("target_accuracy", "must be in [0, 1]"));
            }
        }
        self.lr_schedule().validate()
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            warmup_steps: self.warmup_steps,
            lr_start: self.lr_start,
            lr_peak: self.lr_peak,
            lr_floor: self.lr_floor,
            total_steps: self.steps,
        }
    }

    pub fn task_gen(&self) -> Result<TaskGen> {
        TaskGen::new(self.task, self.vocab, self.min_len, self.max_len, self.seed)
    }

    /// The fixed held-out examples; identical for every run with this
    /// seed and disjoint in stream from the training data.
    pub fn eval_examples(&self) -> Result<Vec<Example>> {
        let gen = self.task_gen()?;
        let mut rng = Rng::new(self.seed).fork(1);
        Ok((0..self.eval_sequences).map(|_| gen.example(&mut rng)).collect())
    }
}

fn pad_targets(targets: &[usize]) -> Vec<Option<usize>> {
    targets.iter().map(|&t| (t != PAD).then_some(t)).collect()
}

/// Label-smoothed cross entropy of `logits [N, V]`; `None` targets are
/// padding and skipped.
pub fn smoothed_loss(logits: &Tensor, targets: &[Option<usize>], eps: f64) -> Result<f64> {
    let mut g = crate::Graph::new();
    let x = g.constant(logits.clone());
    let l = g.smoothed_ce(x, targets, eps)?;
    Ok(g.scalar(l))
}

/// Loss and parameter gradient of one micro-batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    /// Mean smoothed loss over the batch's target tokens.
    pub loss: f64,
    pub tokens: usize,
    /// Gradient of `loss`, in parameter order.
    pub grads: Vec<Vec<f64>>,
}

/// Forward and backward over every sequence of `batch` in one graph.
pub fn batch_gradient(model: &Model, batch: &Batch, eps: f64, dropout: Option<Rng>) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut s = Session::training(model.params(), dropout);
    let mut parts = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for e in batch.examples() {
        parts.push(model.forward(&mut s, &e.src, e.tgt_in())?);
        targets.extend(pad_targets(e.tgt_out()));
    }
    let logits = s.graph.concat_rows(&parts)?;
    let loss = s.graph.smoothed_ce(logits, &targets, eps)?;
    let value = s.graph.scalar(loss);
    if !value.is_finite() {
        return Err(Error::numeric(format!("training loss is {value}")));
    }
    s.graph.backward(loss)?;
    Ok(BatchGradient {
        loss: value,
        tokens: targets.iter().flatten().count(),
        grads: s.param_grads(),
    })
}

/// Token-weighted combination of micro-batch gradients: each contributes
/// in proportion to its share of target tokens, which reproduces the
/// gradient of the mean loss over all of them.
pub fn accumulated_gradient(
    model: &Model,
    micro_batches: &[Batch],
    eps: f64,
    mut dropout: Option<&mut Rng>,
) -> Result<BatchGradient> {
    if micro_batches.is_empty() {
        return Err(Error::contract("no micro-batches to accumulate"));
    }
    let parts = micro_batches
        .iter()
        .enumerate()
        .map(|(i, b)| batch_gradient(model, b, eps, dropout.as_mut().map(|r| r.fork(i as u64))))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = parts.iter().map(|p| p.tokens).sum();
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
    let mut loss = 0.0;
    for p in &parts {
        let w = p.tokens as f64 / total as f64;
        loss += w * p.loss;
        for (acc, g) in grads.iter_mut().zip(&p.grads) {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += w * x;
            }
        }
    }
    Ok(BatchGradient { loss, tokens: total, grads })
}

pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    math::sqrt(grads.iter().flatten().map(|g| g * g).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

/// One optimizer update from accumulated micro-batch gradients.
pub fn accumulate_and_update(
    model: &mut Model,
    micro_batches: &[Batch],
    opt: &mut Adam,
    schedule: &LrSchedule,
    step: usize,
    eps: f64,
    dropout: Option<&mut Rng>,
) -> Result<UpdateMetrics> {
    let acc = accumulated_gradient(model, micro_batches, eps, dropout)?;
    let lr = schedule.lr_at(step);
    opt.step(model.params_mut(), &acc.grads, lr)?;
    Ok(UpdateMetrics {
        step,
        loss: acc.loss,
        lr,
        grad_norm: grad_norm(&acc.grads),
        tokens: acc.tokens,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean smoothed loss per target token.
    pub loss: f64,
    /// Teacher-forced next-token accuracy.
    pub accuracy: f64,
    pub tokens: usize,
}

/// Teacher-forced evaluation without dropout.
pub fn evaluate(model: &Model, batches: &[Batch], eps: f64) -> Result<EvalMetrics> {
    let v = model.config().vocab_tgt;
    let (mut loss, mut correct, mut tokens) = (0.0, 0usize, 0usize);
    for b in batches {
        for e in b.examples() {
            let logits = model.logits(&e.src, e.tgt_in())?;
            let n = e.tgt_out().len();
            loss += smoothed_loss(&logits, &pad_targets(e.tgt_out()), eps)? * n as f64;
            for (i, &t) in e.tgt_out().iter().enumerate() {
                let row = &logits.data()[i * v..(i + 1) * v];
                let arg = (0..v).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                correct += usize::from(arg == t);
            }
            tokens += n;
        }
    }
    if tokens == 0 {
        return Err(Error::contract("nothing to evaluate"));
    }
    Ok(EvalMetrics {
        loss: loss / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub stopped_early: bool,
    pub final_eval: EvalMetrics,
}

/// Single-writer training loop over generated data.
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    gen: TaskGen,
    opt: Adam,
    schedule: LrSchedule,
    data_rng: Rng,
    dropout_rng: Rng,
    eval_set: Vec<Batch>,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mc = model.config();
        if mc.vocab_tgt != config.vocab || (mc.task == ModelTask::Seq2seq && mc.vocab_src != config.vocab) {
            return Err(Error::config("vocab", "must match the model vocabulary"));
        }
        if (mc.task == ModelTask::Lm) != (config.task == TaskKind::CharLm) {
            return Err(Error::config("task", "char_lm needs an lm model and the other tasks seq2seq"));
        }
        let gen = config.task_gen()?;
        let mut root = Rng::new(config.seed);
        let data_rng = root.fork(2);
        let dropout_rng = root.fork(3);
        let eval_set = vec![Batch::from_examples(config.eval_examples()?)];
        let opt = Adam::new(model.params(), config.adam);
        let schedule = config.lr_schedule();
        Ok(Self {
            model,
            config,
            gen,
            opt,
            schedule,
            data_rng,
            dropout_rng,
            eval_set,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn task_gen(&self) -> &TaskGen {
        &self.gen
    }

    pub fn eval_set(&self) -> &[Batch] {
        &self.eval_set
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn update(&mut self) -> Result<UpdateMetrics> {
        let micro: Vec<Batch> = (0..self.config.accumulation)
            .map(|_| self.gen.batch(&mut self.data_rng, self.config.batch_tokens))
            .collect();
        let dropout = (self.model.config().dropout > 0.0).then_some(&mut self.dropout_rng);
        let m = accumulate_and_update(
            &mut self.model,
            &micro,
            &mut self.opt,
            &self.schedule,
            self.step + 1,
            self.config.label_smoothing,
            dropout,
        )?;
        self.step += 1;
        Ok(m)
    }

    pub fn evaluate(&self) -> Result<EvalMetrics> {
        evaluate(&self.model, &self.eval_set, self.config.label_smoothing)
    }

    /// Train until `steps` updates or the accuracy target. `on_update`
    /// sees every update and each evaluation made after it.
    pub fn run<F>(&mut self, mut on_update: F) -> Result<TrainSummary>
    where
        F: FnMut(&UpdateMetrics, Option<&EvalMetrics>),
    {
        let every = self.config.eval_every;
        while self.step < self.config.steps {
            let m = self.update()?;
            let eval = if every > 0 && self.step.is_multiple_of(every) {
                Some(self.evaluate()?)
            } else {
                None
            };
            on_update(&m, eval.as_ref());
            if let (Some(e), Some(target)) = (eval, self.config.target_accuracy) {
                if e.accuracy >= target {
                    return Ok(TrainSummary {
                        steps: self.step,
                        stopped_early: true,
                        final_eval: e,
                    });
                }
            }
        }
        Ok(TrainSummary {
            steps: self.step,
            stopped_early: false,
            final_eval: self.evaluate()?,
        })
    }
}
