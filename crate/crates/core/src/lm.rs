//! Backoff n-gram language model with additive smoothing.
//!
//! Counts are kept for every context length from 0 to `order - 1`. A
//! distribution is read off the longest suffix of the query context that has
//! been observed (stupid-backoff longest match) and smoothed there:
//!
//! ```text
//! P(w | ctx) = (count(ctx, w) + alpha) / (total(ctx) + alpha * V)
//! ```
//!
//! When not even the empty context has counts the distribution is uniform.
//! Contexts never cross block boundaries.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::corpus::{Shard, TokenId, TokenSequence};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("empty training data")]
    EmptyTrainingData,
    #[error("model order must be at least 1")]
    InvalidOrder,
    #[error("smoothing alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("carryover decay must be in [0, 1), got {0}")]
    InvalidDecay(f64),
    #[error("accumulate mode requires a previous model")]
    MissingPrevious,
    #[error("previous model has vocabulary size {found}, expected {expected}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("model snapshot line {line}: {msg}")]
    Snapshot { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How a new model relates to the one from the previous iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefitMode {
    /// Counts come from the current shard only.
    #[default]
    Fresh,
    /// Counts are the shard counts plus `decay` times the previous counts.
    Accumulate,
}

#[derive(Debug, Clone, PartialEq)]
struct ContextStats {
    total: f64,
    /// Next-token counts sorted by token id.
    next: Vec<(TokenId, f64)>,
    /// Observed next tokens with their log-probabilities, best first;
    /// ties broken by smaller id.
    ranked: Vec<(TokenId, f64)>,
}

impl ContextStats {
    fn count(&self, w: TokenId) -> f64 {
        match self.next.binary_search_by_key(&w, |&(id, _)| id) {
            Ok(i) => self.next[i].1,
            Err(_) => 0.0,
        }
    }

    fn contains(&self, w: TokenId) -> bool {
        self.next.binary_search_by_key(&w, |&(id, _)| id).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    trained_on: usize,
    contexts: HashMap<Box<[TokenId]>, ContextStats>,
}

/// Probability vector over the vocabulary for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDist(pub Vec<f64>);

impl NextTokenDist {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// Ranked view of the distribution at one matched context, used by beam search.
#[derive(Debug, Clone, Copy)]
pub struct RankedDist<'a> {
    stats: Option<&'a ContextStats>,
    unseen_log_prob: f64,
    vocab_size: usize,
}

impl<'a> RankedDist<'a> {
    /// Observed next tokens with log-probabilities, best first, ties by id.
    pub fn ranked(&self) -> &'a [(TokenId, f64)] {
        self.stats.map(|s| s.ranked.as_slice()).unwrap_or(&[])
    }

    /// Log-probability shared by every token not in [`Self::ranked`].
    pub fn unseen_log_prob(&self) -> f64 {
        self.unseen_log_prob
    }

    pub fn is_seen(&self, w: TokenId) -> bool {
        self.stats.is_some_and(|s| s.contains(w))
    }

    /// The `limit` smallest token ids that were not observed in this context.
    pub fn smallest_unseen(&self, limit: usize) -> impl Iterator<Item = TokenId> + 'a {
        let stats = self.stats;
        (0..self.vocab_size as TokenId)
            .filter(move |&w| !stats.is_some_and(|s| s.contains(w)))
            .take(limit)
    }
}

/// What the ecosystem needs from a model: scoring and continuation.
pub trait LanguageModel: Send + Sync {
    fn sequence_log_prob(&self, seq: &[TokenId]) -> f64;

    /// Continues `prompt` with `len` tokens using a width-`width` search.
    fn continuation(&self, prompt: &[TokenId], len: usize, width: usize) -> TokenSequence;

    fn sequence_perplexity(&self, seq: &[TokenId]) -> f64 {
        (-self.sequence_log_prob(seq) / seq.len() as f64).exp()
    }

    fn perplexity(&self, seqs: &[TokenSequence]) -> Perplexities {
        let per_sequence: Vec<f64> = seqs
            .iter()
            .map(|s| self.sequence_perplexity(s.ids()))
            .collect();
        let mean = crate::metrics::mean(&per_sequence);
        Perplexities { per_sequence, mean }
    }
}

impl LanguageModel for NGramModel {
    fn sequence_log_prob(&self, seq: &[TokenId]) -> f64 {
        NGramModel::sequence_log_prob(self, seq)
    }

    fn continuation(&self, prompt: &[TokenId], len: usize, width: usize) -> TokenSequence {
        crate::gen::beam_continuation(self, prompt, len, width)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn sequence_log_prob(&self, seq: &[TokenId]) -> f64 {
        (**self).sequence_log_prob(seq)
    }

    fn continuation(&self, prompt: &[TokenId], len: usize, width: usize) -> TokenSequence {
        (**self).continuation(prompt, len, width)
    }
}

#[derive(Debug, Clone)]
pub struct Perplexities {
    pub per_sequence: Vec<f64>,
    pub mean: f64,
}

#[inline]
fn smoothed_log_prob(count: f64, total: f64, alpha: f64, vocab_size: usize) -> f64 {
    ((count + alpha) / (total + alpha * vocab_size as f64)).ln()
}

impl NGramModel {
    /// A model without counts; every distribution is uniform.
    pub fn uniform(order: usize, alpha: f64, vocab_size: usize) -> Self {
        NGramModel {
            order: order.max(1),
            alpha,
            vocab_size,
            trained_on: 0,
            contexts: HashMap::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn trained_on(&self) -> usize {
        self.trained_on
    }

    pub fn context_count(&self) -> usize {
        self.contexts.len()
    }

    /// Raw count of `next` after exactly `context` (no backoff).
    pub fn count(&self, context: &[TokenId], next: TokenId) -> f64 {
        self.contexts.get(context).map_or(0.0, |s| s.count(next))
    }

    /// Total count of exactly `context` (no backoff).
    pub fn context_total(&self, context: &[TokenId]) -> f64 {
        self.contexts.get(context).map_or(0.0, |s| s.total)
    }

    /// Same counts, different smoothing.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self, LmError> {
        check_alpha(alpha)?;
        let mut m = self.clone();
        m.alpha = alpha;
        m.rerank();
        Ok(m)
    }

    fn matched(&self, context: &[TokenId]) -> Option<&ContextStats> {
        let longest = context.len().min(self.order - 1);
        (0..=longest)
            .rev()
            .find_map(|j| self.contexts.get(&context[context.len() - j..]))
    }

    /// Log-probability of `w` following `context`.
    pub fn log_prob(&self, context: &[TokenId], w: TokenId) -> f64 {
        match self.matched(context) {
            Some(s) => smoothed_log_prob(s.count(w), s.total, self.alpha, self.vocab_size),
            None => (1.0 / self.vocab_size as f64).ln(),
        }
    }

    pub fn ranked_dist(&self, context: &[TokenId]) -> RankedDist<'_> {
        let stats = self.matched(context);
        let unseen_log_prob = match stats {
            Some(s) => smoothed_log_prob(0.0, s.total, self.alpha, self.vocab_size),
            None => (1.0 / self.vocab_size as f64).ln(),
        };
        RankedDist {
            stats,
            unseen_log_prob,
            vocab_size: self.vocab_size,
        }
    }

    pub fn next_token_dist(&self, context: &[TokenId]) -> NextTokenDist {
        let v = self.vocab_size;
        match self.matched(context) {
            Some(s) => {
                let z = s.total + self.alpha * v as f64;
                let mut probs = vec![self.alpha / z; v];
                for &(w, c) in &s.next {
                    probs[w as usize] = (c + self.alpha) / z;
                }
                NextTokenDist(probs)
            }
            None => NextTokenDist(vec![1.0 / v as f64; v]),
        }
    }

    /// Sum of per-position log-probabilities; position `i` is conditioned on
    /// at most the `order - 1` preceding tokens of the same sequence.
    pub fn sequence_log_prob(&self, seq: &[TokenId]) -> f64 {
        let mut lp = 0.0;
        for i in 0..seq.len() {
            let start = i.saturating_sub(self.order - 1);
            lp += self.log_prob(&seq[start..i], seq[i]);
        }
        lp
    }

    fn rerank(&mut self) {
        let (alpha, v) = (self.alpha, self.vocab_size);
        for s in self.contexts.values_mut() {
            let total = s.total;
            let mut ranked: Vec<(TokenId, f64)> = s
                .next
                .iter()
                .map(|&(w, c)| (w, smoothed_log_prob(c, total, alpha, v)))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            s.ranked = ranked;
        }
    }

    fn from_counts(
        order: usize,
        alpha: f64,
        vocab_size: usize,
        trained_on: usize,
        counts: CountTable,
    ) -> Self {
        let contexts = counts
            .into_iter()
            .map(|(ctx, next)| {
                let mut next: Vec<(TokenId, f64)> = next.into_iter().filter(|e| e.1 > 0.0).collect();
                next.sort_unstable_by_key(|e| e.0);
                let total = next.iter().map(|e| e.1).sum();
                (
                    ctx,
                    ContextStats {
                        total,
                        next,
                        ranked: Vec::new(),
                    },
                )
            })
            .filter(|(_, s)| !s.next.is_empty())
            .collect();
        let mut m = NGramModel {
            order,
            alpha,
            vocab_size,
            trained_on,
            contexts,
        };
        m.rerank();
        m
    }

    /// Writes the versioned, byte-stable text snapshot.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "ngram-model v1")?;
        writeln!(w, "order {}", self.order)?;
        writeln!(w, "alpha {:?}", self.alpha)?;
        writeln!(w, "vocab {}", self.vocab_size)?;
        writeln!(w, "trained_on {}", self.trained_on)?;
        let mut keys: Vec<&Box<[TokenId]>> = self.contexts.keys().collect();
        keys.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        let n: usize = self.contexts.values().map(|s| s.next.len()).sum();
        writeln!(w, "entries {n}")?;
        for ctx in keys {
            let ctx_str = if ctx.is_empty() {
                "-".to_string()
            } else {
                ctx.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
            };
            for &(next, c) in &self.contexts[ctx].next {
                writeln!(w, "{ctx_str}\t{next}\t{c:?}")?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(r: R) -> Result<Self, LmError> {
        let bad = |line: usize, msg: &str| LmError::Snapshot {
            line,
            msg: msg.to_string(),
        };
        let mut lines = r.lines().enumerate();
        let mut header = |key: &str| -> Result<String, LmError> {
            let (i, line) = lines.next().ok_or_else(|| bad(0, "truncated header"))?;
            let line = line?;
            line.strip_prefix(key)
                .and_then(|v| v.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(i + 1, &format!("expected {key}")))
        };
        if header("ngram-model")? != "v1" {
            return Err(bad(1, "unsupported version"));
        }
        let order: usize = header("order")?.parse().map_err(|_| bad(2, "order"))?;
        let alpha: f64 = header("alpha")?.parse().map_err(|_| bad(3, "alpha"))?;
        let vocab_size: usize = header("vocab")?.parse().map_err(|_| bad(4, "vocab"))?;
        let trained_on: usize = header("trained_on")?.parse().map_err(|_| bad(5, "trained_on"))?;
        let entries: usize = header("entries")?.parse().map_err(|_| bad(6, "entries"))?;
        if order == 0 {
            return Err(LmError::InvalidOrder);
        }
        check_alpha(alpha)?;
        let mut counts: CountTable = HashMap::new();
        let mut seen = 0;
        for (i, line) in lines {
            let line = line?;
            let mut parts = line.split('\t');
            let (Some(ctx), Some(next), Some(c), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad(i + 1, "expected 3 tab-separated fields"));
            };
            let ctx: Vec<TokenId> = if ctx == "-" {
                Vec::new()
            } else {
                ctx.split(' ')
                    .map(|t| t.parse().map_err(|_| bad(i + 1, "context id")))
                    .collect::<Result<_, _>>()?
            };
            let next: TokenId = next.parse().map_err(|_| bad(i + 1, "next id"))?;
            let c: f64 = c.parse().map_err(|_| bad(i + 1, "count"))?;
            if ctx.len() >= order || !c.is_finite() || c <= 0.0 || next as usize >= vocab_size {
                return Err(bad(i + 1, "entry out of range"));
            }
            counts.entry(ctx.into_boxed_slice()).or_default().insert(next, c);
            seen += 1;
        }
        if seen != entries {
            return Err(bad(0, "entry count mismatch"));
        }
        Ok(NGramModel::from_counts(order, alpha, vocab_size, trained_on, counts))
    }
}

fn check_alpha(alpha: f64) -> Result<(), LmError> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(LmError::InvalidAlpha(alpha))
    }
}

/// Parameters of a single fit.
#[derive(Debug, Clone, Copy)]
pub struct FitParams {
    pub order: usize,
    pub alpha: f64,
    pub mode: RefitMode,
    pub decay: f64,
}

type CountTable = HashMap<Box<[TokenId]>, HashMap<TokenId, f64>>;

/// Counts every context/next pair of length up to `order` inside each sequence.
fn count_shard(
    sequences: &[TokenSequence],
    order: usize,
    vocab_size: usize,
) -> Result<CountTable, LmError> {
    let mut counts: CountTable = HashMap::new();
    for seq in sequences {
        let ids = seq.ids();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(LmError::TokenOutOfRange { id, vocab_size });
        }
        for i in 0..ids.len() {
            let longest = i.min(order - 1);
            for j in 0..=longest {
                let ctx = &ids[i - j..i];
                let next = match counts.get_mut(ctx) {
                    Some(n) => n,
                    None => counts.entry(ctx.into()).or_default(),
                };
                *next.entry(ids[i]).or_insert(0.0) += 1.0;
            }
        }
    }
    Ok(counts)
}

/// Fits a model on a shard. In accumulate mode the previous model's counts
/// (restricted to contexts shorter than `order`) are added with weight `decay`.
pub fn fit(
    shard: &Shard,
    vocab_size: usize,
    params: FitParams,
    prev: Option<&NGramModel>,
) -> Result<NGramModel, LmError> {
    if shard.is_empty() {
        return Err(LmError::EmptyTrainingData);
    }
    if params.order == 0 {
        return Err(LmError::InvalidOrder);
    }
    check_alpha(params.alpha)?;
    if !(0.0..1.0).contains(&params.decay) {
        return Err(LmError::InvalidDecay(params.decay));
    }
    let mut counts = count_shard(&shard.sequences, params.order, vocab_size)?;
    if params.mode == RefitMode::Accumulate {
        let prev = prev.ok_or(LmError::MissingPrevious)?;
        if prev.vocab_size != vocab_size {
            return Err(LmError::VocabMismatch {
                expected: vocab_size,
                found: prev.vocab_size,
            });
        }
        if params.decay > 0.0 {
            let mut keys: Vec<&Box<[TokenId]>> = prev
                .contexts
                .keys()
                .filter(|k| k.len() < params.order)
                .collect();
            keys.sort();
            for ctx in keys {
                let entry = counts.entry(ctx.clone()).or_default();
                for &(w, c) in &prev.contexts[ctx].next {
                    *entry.entry(w).or_insert(0.0) += params.decay * c;
                }
            }
        }
    }
    Ok(NGramModel::from_counts(
        params.order,
        params.alpha,
        vocab_size,
        shard.len(),
        counts,
    ))
}

/// Hyperparameter grid and refit policy for validation-driven selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionGrid {
    pub orders: Vec<usize>,
    pub alphas: Vec<f64>,
    pub mode: RefitMode,
    pub decay: f64,
}

impl Default for SelectionGrid {
    fn default() -> Self {
        SelectionGrid {
            orders: vec![3],
            alphas: vec![0.1, 0.01, 0.001],
            mode: RefitMode::Fresh,
            decay: 0.0,
        }
    }
}

/// Fits one candidate per (order, alpha) and keeps the one with the lowest
/// mean validation perplexity. Ties go to the smaller order, then the smaller alpha.
pub fn select_model(
    shard: &Shard,
    validation: &[TokenSequence],
    vocab_size: usize,
    grid: &SelectionGrid,
    prev: Option<&NGramModel>,
) -> Result<NGramModel, LmError> {
    if grid.orders.is_empty() || grid.alphas.is_empty() {
        return Err(LmError::EmptyGrid);
    }
    if validation.is_empty() {
        return Err(LmError::EmptyValidation);
    }
    let mut orders = grid.orders.clone();
    orders.sort_unstable();
    orders.dedup();
    let mut alphas = grid.alphas.clone();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();

    let mut best: Option<(f64, NGramModel)> = None;
    for &order in &orders {
        // counts do not depend on alpha
        let base = fit(
            shard,
            vocab_size,
            FitParams {
                order,
                alpha: alphas[0],
                mode: grid.mode,
                decay: grid.decay,
            },
            prev,
        )?;
        for &alpha in &alphas {
            let candidate = if alpha == base.alpha {
                base.clone()
            } else {
                base.with_alpha(alpha)?
            };
            let score = candidate.perplexity(validation).mean;
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, candidate));
            }
        }
    }
    Ok(best.map(|(_, m)| m).expect("non-empty grid"))
}
