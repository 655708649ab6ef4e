//! Deterministic continuation by beam search, plus an exhaustive oracle.
//!
//! Hypotheses are ordered by cumulative log-probability, highest first, and
//! equal scores by the lexicographically smaller token sequence. The same
//! total order is used when pruning and when picking the final answer, so
//! the output is a pure function of the model and prompt.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Shard, TokenId, TokenSequence};
use crate::lm::NGramModel;

/// Largest search space the exhaustive oracle will enumerate.
pub const EXHAUSTIVE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("oracle too large: V^L = {vocab}^{len} exceeds {EXHAUSTIVE_LIMIT}")]
    OracleTooLarge { vocab: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
}

/// Best first, then lexicographically smaller.
fn rank(a_score: f64, a: &[TokenId], b_score: f64, b: &[TokenId]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

struct Candidate {
    parent: usize,
    token: TokenId,
    score: f64,
}

/// The prompt tail that can still influence the model.
fn context_tail(model: &NGramModel, prompt: &[TokenId]) -> Vec<TokenId> {
    let keep = model.order() - 1;
    prompt[prompt.len().saturating_sub(keep)..].to_vec()
}

fn hypothesis_context<'a>(
    model: &NGramModel,
    buf: &'a mut Vec<TokenId>,
    tail: &[TokenId],
    tokens: &[TokenId],
) -> &'a [TokenId] {
    buf.clear();
    buf.extend_from_slice(tail);
    buf.extend_from_slice(tokens);
    let keep = model.order() - 1;
    let start = buf.len().saturating_sub(keep);
    &buf[start..]
}

/// Runs beam search and returns the best complete hypothesis with its score.
pub fn beam_search(model: &NGramModel, prompt: &[TokenId], len: usize, width: usize) -> Hypothesis {
    let width = width.max(1);
    let tail = context_tail(model, prompt);
    let mut beam = vec![Hypothesis {
        tokens: Vec::with_capacity(len),
        score: 0.0,
    }];
    let mut buf = Vec::new();
    let mut candidates: Vec<Candidate> = Vec::new();

    for _ in 0..len {
        candidates.clear();
        for (parent, hyp) in beam.iter().enumerate() {
            let ctx = hypothesis_context(model, &mut buf, &tail, &hyp.tokens);
            let dist = model.ranked_dist(ctx);

            // Observed tokens in rank order; scores are non-increasing along
            // the ranking, so keep the first `width` plus anything tied with
            // the last one kept.
            let mut boundary = f64::NAN;
            for (kept, &(token, lp)) in dist.ranked().iter().enumerate() {
                let score = hyp.score + lp;
                if kept >= width && score != boundary {
                    break;
                }
                candidates.push(Candidate { parent, token, score });
                boundary = score;
            }
            // Unobserved tokens share one score; the smallest ids win ties.
            let unseen = hyp.score + dist.unseen_log_prob();
            for token in dist.smallest_unseen(width) {
                candidates.push(Candidate {
                    parent,
                    token,
                    score: unseen,
                });
            }
        }

        candidates.sort_by(|a, b| {
            b.score.total_cmp(&a.score).then_with(|| {
                beam[a.parent]
                    .tokens
                    .cmp(&beam[b.parent].tokens)
                    .then(a.token.cmp(&b.token))
            })
        });
        beam = candidates
            .iter()
            .take(width)
            .map(|c| {
                let mut tokens = Vec::with_capacity(len);
                tokens.extend_from_slice(&beam[c.parent].tokens);
                tokens.push(c.token);
                Hypothesis {
                    tokens,
                    score: c.score,
                }
            })
            .collect();
    }
    beam.into_iter()
        .min_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens))
        .expect("beam never empty")
}

/// Length-`len` continuation of `prompt` found by width-`width` beam search.
pub fn beam_continuation(
    model: &NGramModel,
    prompt: &[TokenId],
    len: usize,
    width: usize,
) -> TokenSequence {
    TokenSequence::new(beam_search(model, prompt, len, width).tokens)
}

/// Beam search with width 1.
pub fn greedy(model: &NGramModel, prompt: &[TokenId], len: usize) -> Hypothesis {
    beam_search(model, prompt, len, 1)
}

/// Scores a continuation exactly the way beam search accumulates it.
pub fn continuation_score(model: &NGramModel, prompt: &[TokenId], continuation: &[TokenId]) -> f64 {
    let tail = context_tail(model, prompt);
    let mut buf = Vec::new();
    let mut score = 0.0;
    for i in 0..continuation.len() {
        let ctx = hypothesis_context(model, &mut buf, &tail, &continuation[..i]);
        score += model.log_prob(ctx, continuation[i]);
    }
    score
}

/// The argmax over all `V^len` continuations, enumerated in lexicographic
/// order so that the first of several equal scores wins.
pub fn exhaustive_search(
    model: &NGramModel,
    prompt: &[TokenId],
    len: usize,
) -> Result<Hypothesis, GenError> {
    let v = model.vocab_size();
    let too_large = || GenError::OracleTooLarge { vocab: v, len };
    let mut space: u64 = 1;
    for _ in 0..len {
        space = space.checked_mul(v as u64).ok_or_else(too_large)?;
        if space > EXHAUSTIVE_LIMIT {
            return Err(too_large());
        }
    }
    let mut current = vec![0 as TokenId; len];
    let mut best = Hypothesis {
        tokens: current.clone(),
        score: continuation_score(model, prompt, &current),
    };
    for _ in 1..space {
        // odometer increment, last position fastest
        for pos in (0..len).rev() {
            current[pos] += 1;
            if (current[pos] as usize) < v {
                break;
            }
            current[pos] = 0;
        }
        let score = continuation_score(model, prompt, &current);
        if score > best.score {
            best = Hypothesis {
                tokens: current.clone(),
                score,
            };
        }
    }
    Ok(best)
}

pub fn exhaustive_continuation(
    model: &NGramModel,
    prompt: &[TokenId],
    len: usize,
) -> Result<TokenSequence, GenError> {
    exhaustive_search(model, prompt, len).map(|h| TokenSequence::new(h.tokens))
}

/// One continuation per generation-set block, in generation-set order. Only
/// the continuation (not the prompt) becomes training data.
pub fn generate_dataset(
    model: &NGramModel,
    owner: usize,
    generation_set: &[TokenSequence],
    width: usize,
    len: usize,
) -> Shard {
    let sequences = generation_set
        .par_iter()
        .map(|prompt| beam_continuation(model, prompt.ids(), len, width))
        .collect();
    Shard::new(owner, sequences)
}
