//! Text ingestion, vocabulary, fixed-length blocks and corpus splits.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use rand::seq::index;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{self, Purpose};

pub type TokenId = u32;

/// Surface form written for out-of-vocabulary tokens.
pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus: no whitespace-delimited tokens in input")]
    EmptyCorpus,
    #[error("block size must be at least 2, got {0}")]
    InvalidBlockSize(usize),
    #[error("insufficient tokens: {available} available, block size {block_size}")]
    InsufficientTokens { available: usize, block_size: usize },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("subset fraction must be in (0, 1], got {0}")]
    InvalidSubset(f64),
    #[error("subset of {requested} blocks requested from {available} training blocks")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("degenerate split: {0} split is empty")]
    DegenerateSplit(&'static str),
    #[error("vocabulary file: {0}")]
    VocabFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Word-level vocabulary. Id 0 is always the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from distinct surface strings, in the given order,
    /// after the reserved unknown token. Duplicates and `UNK` are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab {
            tokens: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for tok in tokens {
            let tok = tok.into();
            if !vocab.index.contains_key(&tok) {
                let id = vocab.tokens.len() as TokenId;
                vocab.index.insert(tok.clone(), id);
                vocab.tokens.push(tok);
            }
        }
        vocab
    }

    pub fn unk_id(&self) -> TokenId {
        0
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to surface strings. Ids outside the vocabulary decode to `UNK`.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&id| self.token(id).unwrap_or(UNK)).collect()
    }

    /// One token per line; line number is the id.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for tok in &self.tokens {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let mut lines = r.lines();
        let first = lines.next().transpose()?;
        if first.as_deref() != Some(UNK) {
            return Err(CorpusError::VocabFormat(format!("first line must be {UNK}")));
        }
        let mut rest = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() || line.split_whitespace().count() != 1 || line == UNK {
                return Err(CorpusError::VocabFormat(format!(
                    "line {}: invalid token {line:?}",
                    i + 2
                )));
            }
            rest.push(line);
        }
        let n = rest.len();
        let vocab = Vocab::from_tokens(rest);
        if vocab.len() != n + 1 {
            return Err(CorpusError::VocabFormat("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    /// Short hex digest of the serialized vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.tokens {
            hasher.update(tok.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds the vocabulary of tokens seen at least `min_token_freq` times
/// (first-occurrence order) and encodes the whole text with it.
pub fn ingest_text(
    raw_text: &str,
    min_token_freq: usize,
) -> Result<(Vocab, Vec<TokenId>), CorpusError> {
    let words: Vec<&str> = raw_text.split_whitespace().collect();
    if words.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    let mut order = Vec::new();
    for &w in &words {
        let c = freq.entry(w).or_insert(0);
        if *c == 0 {
            order.push(w);
        }
        *c += 1;
    }
    let vocab = Vocab::from_tokens(
        order
            .into_iter()
            .filter(|w| freq[w] >= min_token_freq.max(1)),
    );
    let stream = words.iter().map(|w| vocab.id(w)).collect();
    Ok((vocab, stream))
}

/// A fixed-length block of token ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }
}

impl AsRef<[TokenId]> for TokenSequence {
    fn as_ref(&self) -> &[TokenId] {
        &self.0
    }
}

/// Cuts the stream into consecutive non-overlapping blocks. The trailing
/// remainder shorter than `block_size` is dropped.
pub fn blockify(stream: &[TokenId], block_size: usize) -> Result<Vec<TokenSequence>, CorpusError> {
    if block_size < 2 {
        return Err(CorpusError::InvalidBlockSize(block_size));
    }
    if stream.len() < block_size {
        return Err(CorpusError::InsufficientTokens {
            available: stream.len(),
            block_size,
        });
    }
    Ok(stream
        .chunks_exact(block_size)
        .map(|c| TokenSequence(c.to_vec()))
        .collect())
}

/// One model's dataset for an iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub owner: usize,
    pub sequences: Vec<TokenSequence>,
}

impl Shard {
    pub fn new(owner: usize, sequences: Vec<TokenSequence>) -> Self {
        Shard { owner, sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// How much of the training partition is kept as the train/generation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubsetSize {
    /// `ceil(fraction * train_blocks)`.
    Fraction(f64),
    /// An exact block count.
    Blocks(usize),
}

impl Default for SubsetSize {
    fn default() -> Self {
        SubsetSize::Fraction(0.4)
    }
}

impl SubsetSize {
    pub fn resolve(self, available: usize) -> Result<usize, CorpusError> {
        match self {
            SubsetSize::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(CorpusError::InvalidSubset(f));
                }
                // guard against 0.4 * 80 = 32.000000000000004
                Ok(((f * available as f64) - 1e-9).ceil().max(0.0) as usize)
            }
            SubsetSize::Blocks(n) if n > available => Err(CorpusError::SubsetTooLarge {
                requested: n,
                available,
            }),
            SubsetSize::Blocks(n) => Ok(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    /// Sampled training blocks in original order.
    pub train_gen: Vec<TokenSequence>,
    /// Positions of `train_gen` blocks within the full training partition.
    pub train_gen_indices: Vec<usize>,
    pub validation: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
}

/// Contiguous front/middle/back partition followed by a seeded subset of the
/// front part.
pub fn make_splits(
    blocks: &[TokenSequence],
    fractions: SplitFractions,
    subset: SubsetSize,
    seed: u64,
) -> Result<CorpusSplits, CorpusError> {
    let f = [fractions.train, fractions.valid, fractions.test];
    if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidFractions(f));
    }
    let total = blocks.len();
    let n_train = (fractions.train * total as f64).round() as usize;
    let n_valid = ((fractions.valid * total as f64).round() as usize).min(total - n_train.min(total));
    let n_train = n_train.min(total);
    let n_test = total - n_train - n_valid;
    for (n, name) in [(n_train, "train"), (n_valid, "validation"), (n_test, "test")] {
        if n == 0 {
            return Err(CorpusError::DegenerateSplit(name));
        }
    }
    let train = &blocks[..n_train];
    let validation = blocks[n_train..n_train + n_valid].to_vec();
    let test = blocks[n_train + n_valid..].to_vec();
    let mut splits = split_with_subset(train, subset, seed)?;
    splits.validation = validation;
    splits.test = test;
    Ok(splits)
}

/// Builds splits from predefined train/validation/test block lists; only the
/// training subset is sampled.
pub fn splits_from_parts(
    train: &[TokenSequence],
    validation: Vec<TokenSequence>,
    test: Vec<TokenSequence>,
    subset: SubsetSize,
    seed: u64,
) -> Result<CorpusSplits, CorpusError> {
    for (n, name) in [(train.len(), "train"), (validation.len(), "validation"), (test.len(), "test")] {
        if n == 0 {
            return Err(CorpusError::DegenerateSplit(name));
        }
    }
    let mut splits = split_with_subset(train, subset, seed)?;
    splits.validation = validation;
    splits.test = test;
    Ok(splits)
}

fn split_with_subset(
    train: &[TokenSequence],
    subset: SubsetSize,
    seed: u64,
) -> Result<CorpusSplits, CorpusError> {
    let count = subset.resolve(train.len())?;
    if count == 0 {
        return Err(CorpusError::DegenerateSplit("train"));
    }
    let mut rng = rng::stream(seed, Purpose::Splits, 0, 0);
    let mut indices = index::sample(&mut rng, train.len(), count).into_vec();
    indices.sort_unstable();
    Ok(CorpusSplits {
        train_gen: indices.iter().map(|&i| train[i].clone()).collect(),
        train_gen_indices: indices,
        validation: Vec::new(),
        test: Vec::new(),
    })
}
