use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A decoded sequence. `tokens` excludes the begin token and includes the
/// end token when `finished`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    /// `score / |tokens|^lenpen`.
    pub normalized: f64,
    /// False when `max_len` was reached without an end token.
    pub finished: bool,
}

fn normalized(score: f64, len: usize, lenpen: f64) -> f64 {
    score / math::pow(len.max(1) as f64, lenpen)
}

fn check_row(row: &[f64]) -> Result<()> {
    if row.iter().any(|x| x.is_nan()) {
        return Err(Error::numeric("NaN log-probability during decoding"));
    }
    Ok(())
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy_with<F>(mut step: F, bos: usize, eos: usize, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut prefix = vec![bos];
    let mut score = 0.0;
    while prefix.len() - 1 < max_len {
        let row = step(&prefix)?;
        check_row(&row)?;
        let (tok, lp) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best });
        score += lp;
        prefix.push(tok);
        if tok == eos {
            break;
        }
    }
    let tokens = prefix[1..].to_vec();
    let finished = tokens.last() == Some(&eos);
    Ok(Hypothesis {
        normalized: normalized(score, tokens.len(), 0.0),
        tokens,
        score,
        finished,
    })
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<usize>,
    score: f64,
}

/// Higher score first, then lexicographically smaller token sequence.
fn rank(a: &Beam, b: &Beam) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over `step`, which maps a prefix (starting with `bos`) to
/// next-token log-probabilities.
///
/// Every step keeps the `beam` best extensions of the live hypotheses by
/// summed log-probability; extensions ending in `eos` leave the beam as
/// finished. Search stops when `beam` hypotheses have finished, nothing is
/// live, or `max_len` tokens were generated. The result is the finished
/// hypothesis with the best `score / len^lenpen`, or the best partial one
/// (flagged unfinished) if none finished.
pub fn beam_search_with<F>(mut step: F, bos: usize, eos: usize, beam: usize, lenpen: f64, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam == 0 {
        return Err(Error::contract("beam size must be at least 1"));
    }
    if lenpen < 0.0 || lenpen.is_nan() {
        return Err(Error::contract("length penalty must be non-negative"));
    }
    let mut live = vec![Beam {
        tokens: vec![bos],
        score: 0.0,
    }];
    let mut finished: Vec<Beam> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for hyp in &live {
            let row = step(&hyp.tokens)?;
            check_row(&row)?;
            for (tok, lp) in row.iter().enumerate() {
                if *lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Beam {
                    tokens,
                    score: hyp.score + lp,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam);
        live.clear();
        for c in candidates {
            if c.tokens.last() == Some(&eos) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() || finished.len() >= beam {
            break;
        }
    }
    let is_finished = !finished.is_empty();
    let pool = if is_finished { finished } else { live };
    let best = pool
        .into_iter()
        .map(|b| {
            let n = normalized(b.score, b.tokens.len() - 1, lenpen);
            (b, n)
        })
        .min_by(|(a, na), (b, nb)| nb.total_cmp(na).then_with(|| a.tokens.cmp(&b.tokens)))
        .ok_or_else(|| Error::contract("beam search produced no hypothesis"))?;
    let (b, n) = best;
    Ok(Hypothesis {
        tokens: b.tokens[1..].to_vec(),
        score: b.score,
        normalized: n,
        finished: is_finished,
    })
}

/// `exp(mean NLL)` of next-token predictions over `stream`. Windows of at
/// most `context_len` inputs are scored independently; `logits` maps a
/// window to `[len, vocab]` logits.
pub fn perplexity_with<F>(stream: &[usize], context_len: usize, mut logits: F) -> Result<f64>
where
    F: FnMut(&[usize]) -> Result<Tensor>,
{
    if stream.len() < 2 {
        return Err(Error::contract("perplexity needs at least two tokens"));
    }
    if context_len == 0 {
        return Err(Error::contract("context length must be positive"));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + context_len).min(stream.len() - 1);
        let out = logits(&stream[start..end])?;
        let vocab = out.shape()[1];
        for (row, &target) in stream[start + 1..end + 1].iter().enumerate() {
            let lp = super::log_softmax(&out.data()[row * vocab..(row + 1) * vocab])?;
            nll -= lp[target];
            count += 1;
        }
        start = end;
    }
    Ok(math::exp(nll / count as f64))
}
