#![allow(dead_code)]

use std::path::PathBuf;

use ecodiv::corpus::{Shard, TokenId, TokenSequence};
use ecodiv::lm::{fit, FitParams, RefitMode};
use ecodiv::NGramModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

pub fn kjv_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/kjv_excerpt.txt")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Whitespace text whose words follow a Zipf law with a little bigram structure.
pub fn synthetic_text(tokens: usize, types: u64, seed: u64) -> String {
    let mut r = rng(seed);
    let zipf = Zipf::new(types, 1.1).unwrap();
    let mut out = String::with_capacity(tokens * 6);
    let mut prev = 1u64;
    for i in 0..tokens {
        let w = if r.gen_bool(0.3) {
            (prev * 7 + 3) % types + 1
        } else {
            zipf.sample(&mut r) as u64
        };
        prev = w;
        if i > 0 {
            out.push(if i % 17 == 0 { '\n' } else { ' ' });
        }
        out.push('w');
        out.push_str(&w.to_string());
    }
    out
}

pub fn random_blocks(r: &mut ChaCha8Rng, count: usize, len: usize, vocab: usize) -> Vec<TokenSequence> {
    (0..count)
        .map(|_| TokenSequence::new((0..len).map(|_| r.gen_range(0..vocab as TokenId)).collect()))
        .collect()
}

pub fn fit_fresh(seqs: &[TokenSequence], vocab: usize, order: usize, alpha: f64) -> NGramModel {
    fit(
        &Shard::new(0, seqs.to_vec()),
        vocab,
        FitParams {
            order,
            alpha,
            mode: RefitMode::Fresh,
            decay: 0.0,
        },
        None,
    )
    .unwrap()
}

/// Occurrences of `ctx` followed by some token inside a sequence, and of `ctx` followed by `w`.
pub fn scan_counts(train: &[TokenSequence], ctx: &[TokenId], w: TokenId) -> (u64, u64) {
    let (mut total, mut hit) = (0, 0);
    for s in train {
        let ids = s.ids();
        for p in 0..ids.len() {
            let end = p + ctx.len();
            if end < ids.len() && &ids[p..end] == ctx {
                total += 1;
                if ids[end] == w {
                    hit += 1;
                }
            }
        }
    }
    (total, hit)
}

/// Backed-off smoothed probability recomputed from the raw training data.
pub fn naive_prob(
    train: &[TokenSequence],
    order: usize,
    alpha: f64,
    vocab: usize,
    ctx: &[TokenId],
    w: TokenId,
) -> f64 {
    let longest = ctx.len().min(order - 1);
    for j in (0..=longest).rev() {
        let suffix = &ctx[ctx.len() - j..];
        let (total, hit) = scan_counts(train, suffix, w);
        if total > 0 {
            return (hit as f64 + alpha) / (total as f64 + alpha * vocab as f64);
        }
    }
    1.0 / vocab as f64
}

/// Perplexity of `seq` from per-position probabilities, accumulated in log space.
pub fn naive_perplexity(
    train: &[TokenSequence],
    order: usize,
    alpha: f64,
    vocab: usize,
    seq: &[TokenId],
) -> f64 {
    let mut lp = 0.0;
    for i in 0..seq.len() {
        let start = i.saturating_sub(order - 1);
        lp += naive_prob(train, order, alpha, vocab, &seq[start..i], seq[i]).ln();
    }
    (-lp / seq.len() as f64).exp()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Argmax over every continuation in lexicographic order, scored step by step
/// with the model's own log-probabilities. Ties keep the earlier sequence.
pub fn enumerate_best(model: &NGramModel, prompt: &[TokenId], len: usize) -> (Vec<TokenId>, f64) {
    let v = model.vocab_size();
    let k = model.order();
    let total = v.pow(len as u32);
    let mut best: Option<(Vec<TokenId>, f64)> = None;
    for code in 0..total {
        let mut cont = vec![0 as TokenId; len];
        let mut c = code;
        for pos in (0..len).rev() {
            cont[pos] = (c % v) as TokenId;
            c /= v;
        }
        let mut full = prompt.to_vec();
        let mut score = 0.0;
        for &w in &cont {
            let start = full.len().saturating_sub(k - 1);
            score += model.log_prob(&full[start..], w);
            full.push(w);
        }
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((cont, score));
        }
    }
    best.unwrap()
}

/// Textbook beam search: extend every hypothesis by every token, sort all
/// candidates by (score desc, tokens asc), keep the first `width`.
pub fn reference_beam(model: &NGramModel, prompt: &[TokenId], len: usize, width: usize) -> (Vec<TokenId>, f64) {
    let v = model.vocab_size() as TokenId;
    let k = model.order();
    let mut beam: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..len {
        let mut next = Vec::new();
        for (toks, score) in &beam {
            let full: Vec<TokenId> = prompt.iter().chain(toks).copied().collect();
            let ctx = &full[full.len().saturating_sub(k - 1)..];
            for w in 0..v {
                let mut t = toks.clone();
                t.push(w);
                next.push((t, score + model.log_prob(ctx, w)));
            }
        }
        next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        next.truncate(width);
        beam = next;
    }
    beam.swap_remove(0)
}
