use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tokens::{BOS, EOS, FIRST_CONTENT, PAD};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ToyTranslate,
    CharLm,
}

/// One source/target pair, both wrapped as `BOS .. EOS`. Language-model
/// examples have an empty source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Example {
    /// Decoder input (target without its last token).
    pub fn tgt_in(&self) -> &[usize] {
        &self.tgt[..self.tgt.len() - 1]
    }

    /// Next-token targets (target without its first token).
    pub fn tgt_out(&self) -> &[usize] {
        &self.tgt[1..]
    }
}

/// Rows right-padded with [`PAD`] to a common length per side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

fn pad_rows(rows: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect()
}

fn unpad(row: &[usize]) -> &[usize] {
    let end = row.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    &row[..end]
}

impl Batch {
    pub fn from_examples(examples: Vec<Example>) -> Self {
        let (src, tgt) = examples.into_iter().map(|e| (e.src, e.tgt)).unzip();
        Self {
            src: pad_rows(src),
            tgt: pad_rows(tgt),
        }
    }

    pub fn len(&self) -> usize {
        self.tgt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tgt.is_empty()
    }

    /// Example `i` with padding removed.
    pub fn example(&self, i: usize) -> Example {
        Example {
            src: unpad(&self.src[i]).to_vec(),
            tgt: unpad(&self.tgt[i]).to_vec(),
        }
    }

    pub fn examples(&self) -> impl Iterator<Item = Example> + '_ {
        (0..self.len()).map(|i| self.example(i))
    }

    /// Number of predicted (non-pad) target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt.iter().map(|r| unpad(r).len().saturating_sub(1)).sum()
    }

    /// Split into batches of at most `per` examples each.
    pub fn split(&self, per: usize) -> Vec<Batch> {
        let ex: Vec<Example> = self.examples().collect();
        ex.chunks(per.max(1)).map(|c| Batch::from_examples(c.to_vec())).collect()
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Probability that the order-3 grammar emits its preferred continuation.
pub const GRAMMAR_PREFERRED: f64 = 0.75;

/// Generator for one synthetic task. Everything task-specific (the
/// translation permutation, the grammar) is fixed at construction.
#[derive(Clone, Debug)]
pub struct TaskGen {
    task: TaskKind,
    vocab: usize,
    min_len: usize,
    max_len: usize,
    /// Permutation of content ids for the toy translation task.
    perm: Vec<usize>,
    grammar_seed: u64,
}

impl TaskGen {
    pub fn new(task: TaskKind, vocab: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Self> {
        if vocab <= FIRST_CONTENT {
            return Err(Error::config("vocab", "needs at least one id beyond the 3 reserved ones"));
        }
        if min_len == 0 || min_len > max_len {
            return Err(Error::config("min_len", "need 1 <= min_len <= max_len"));
        }
        let mut rng = Rng::new(seed).fork(0x7a5c);
        let content = vocab - FIRST_CONTENT;
        let perm = rng.permutation(content).into_iter().map(|p| p + FIRST_CONTENT).collect();
        Ok(Self {
            task,
            vocab,
            min_len,
            max_len,
            perm,
            grammar_seed: rng.next_u64(),
        })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn content_token(&self, rng: &mut Rng) -> usize {
        FIRST_CONTENT + rng.below(self.vocab - FIRST_CONTENT)
    }

    /// Target content for source content under the translation rule:
    /// map every id through the permutation, then swap adjacent pairs.
    pub fn translate(&self, src: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = src.iter().map(|&t| self.perm[t - FIRST_CONTENT]).collect();
        for pair in out.chunks_mut(2) {
            pair.reverse();
        }
        out
    }

    /// Inverse of [`TaskGen::translate`].
    pub fn untranslate(&self, tgt: &[usize]) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p - FIRST_CONTENT] = i + FIRST_CONTENT;
        }
        let mut out = tgt.to_vec();
        for pair in out.chunks_mut(2) {
            pair.reverse();
        }
        out.iter().map(|&t| inv[t - FIRST_CONTENT]).collect()
    }

    /// The two candidate continuations of a 3-token context; the first is
    /// preferred.
    pub fn grammar_candidates(&self, ctx: [usize; 3]) -> [usize; 2] {
        let content = (self.vocab - FIRST_CONTENT) as u64;
        let h = mix(self.grammar_seed ^ mix(ctx[0] as u64 ^ mix(ctx[1] as u64 ^ mix(ctx[2] as u64))));
        let a = h % content;
        let b = (a + 1 + mix(h) % (content - 1).max(1)) % content;
        [FIRST_CONTENT + a as usize, FIRST_CONTENT + b as usize]
    }

    /// A grammar stream of `len` content tokens.
    pub fn grammar_stream(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut ctx = [BOS; 3];
        for _ in 0..len {
            let [a, b] = self.grammar_candidates(ctx);
            let t = if rng.uniform() < GRAMMAR_PREFERRED { a } else { b };
            out.push(t);
            ctx = [ctx[1], ctx[2], t];
        }
        out
    }

    pub fn example(&self, rng: &mut Rng) -> Example {
        let len = self.min_len + rng.below(self.max_len - self.min_len + 1);
        let wrap = |content: Vec<usize>| {
            let mut v = Vec::with_capacity(content.len() + 2);
            v.push(BOS);
            v.extend(content);
            v.push(EOS);
            v
        };
        if self.task == TaskKind::CharLm {
            return Example {
                src: Vec::new(),
                tgt: wrap(self.grammar_stream(len, rng)),
            };
        }
        let content: Vec<usize> = (0..len).map(|_| self.content_token(rng)).collect();
        let out = match self.task {
            TaskKind::Copy => content.clone(),
            TaskKind::Reverse => content.iter().rev().copied().collect(),
            TaskKind::ToyTranslate => self.translate(&content),
            TaskKind::CharLm => unreachable!(),
        };
        Example {
            src: wrap(content),
            tgt: wrap(out),
        }
    }

    /// Examples drawn until the next one would push the predicted target
    /// tokens past `batch_tokens`; always at least one.
    pub fn batch(&self, rng: &mut Rng, batch_tokens: usize) -> Batch {
        let mut examples = Vec::new();
        let mut tokens = 0;
        loop {
            let e = self.example(rng);
            let n = e.tgt.len() - 1;
            if !examples.is_empty() && tokens + n > batch_tokens {
                break;
            }
            tokens += n;
            examples.push(e);
        }
        Batch::from_examples(examples)
    }
}
