//! The train / generate / pool / redistribute loop.
//!
//! At `t = 0` the sampled training set is shuffled and cut into `M` fixed
//! generation sets, and each model trains on its own generation set. Every
//! iteration then fits the models, measures them, lets each one continue the
//! blocks of its generation set, pools all continuations, shuffles the pool
//! and deals it back out in `M` equal shards.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusSplits, Shard, SubsetSize, TokenSequence};
use crate::lm::{self, LanguageModel, LmError, NGramModel, SelectionGrid};
use crate::metrics::{self, DistributionSummary, Histogram, MetricsError, SupportStats};
use crate::rng::{self, Purpose};

#[derive(Debug, Error)]
pub enum EcosystemError {
    #[error("config error: {0}")]
    Config(String),
    #[error("model {model}: {source}")]
    Model {
        model: usize,
        #[source]
        source: LmError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Observer(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcosystemConfig {
    /// Number of models `M`.
    pub models: usize,
    /// Number of iterations `T`.
    pub iterations: usize,
    pub seed: u64,
    pub block_size: usize,
    pub beam_width: usize,
    pub grid: SelectionGrid,
    pub subset: SubsetSize,
    /// n-gram order for support statistics; defaults to the smallest model order.
    pub support_order: Option<usize>,
    /// Also fit and evaluate one model on the unsegmented training set.
    pub baseline: bool,
}

impl Default for EcosystemConfig {
    fn default() -> Self {
        EcosystemConfig {
            models: 1,
            iterations: 10,
            seed: 0,
            block_size: 128,
            beam_width: 5,
            grid: SelectionGrid::default(),
            subset: SubsetSize::default(),
            support_order: None,
            baseline: false,
        }
    }
}

impl EcosystemConfig {
    pub fn validate(&self) -> Result<(), EcosystemError> {
        let fail = |msg: String| Err(EcosystemError::Config(msg));
        if self.models == 0 {
            return fail("models must be at least 1".into());
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if self.block_size < 2 {
            return fail("block_size must be at least 2".into());
        }
        if self.beam_width == 0 {
            return fail("beam_width must be at least 1".into());
        }
        if self.grid.orders.is_empty() || self.grid.alphas.is_empty() {
            return fail("orders and alphas must be non-empty".into());
        }
        if self.grid.orders.contains(&0) {
            return fail("model orders must be at least 1".into());
        }
        if let Some(a) = self.grid.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return fail(format!("alpha must be positive, got {a}"));
        }
        if !(0.0..1.0).contains(&self.grid.decay) {
            return fail(format!("decay must be in [0, 1), got {}", self.grid.decay));
        }
        if self.support_order == Some(0) {
            return fail("support_order must be at least 1".into());
        }
        Ok(())
    }

    /// Checks that the train/generation set splits evenly into `models` shards.
    pub fn check_divides(&self, train_blocks: usize) -> Result<(), EcosystemError> {
        if train_blocks == 0 || !train_blocks.is_multiple_of(self.models) {
            return Err(EcosystemError::Config(format!(
                "{} models do not divide {} training blocks",
                self.models, train_blocks
            )));
        }
        Ok(())
    }

    pub fn support_granularity(&self) -> usize {
        self.support_order
            .unwrap_or_else(|| self.grid.orders.iter().copied().min().unwrap_or(1))
    }
}

/// Produces the next model for a shard.
pub trait Learner: Sync {
    type Model: LanguageModel + Clone;

    fn train(
        &self,
        shard: &Shard,
        validation: &[TokenSequence],
        prev: Option<&Self::Model>,
    ) -> Result<Self::Model, LmError>;

    /// Short human-readable description of a trained model.
    fn describe(&self, _model: &Self::Model) -> String {
        String::new()
    }
}

/// Validation-selected n-gram models.
#[derive(Debug, Clone)]
pub struct NGramLearner {
    pub vocab_size: usize,
    pub grid: SelectionGrid,
}

impl Learner for NGramLearner {
    type Model = NGramModel;

    fn train(
        &self,
        shard: &Shard,
        validation: &[TokenSequence],
        prev: Option<&NGramModel>,
    ) -> Result<NGramModel, LmError> {
        lm::select_model(shard, validation, self.vocab_size, &self.grid, prev)
    }

    fn describe(&self, model: &NGramModel) -> String {
        format!("k={} alpha={}", model.order(), model.alpha())
    }
}

#[derive(Debug, Clone)]
pub struct EcosystemState<M> {
    pub t: usize,
    /// Models fitted at the previous iteration (`None` before the first).
    pub models: Vec<Option<M>>,
    pub training_shards: Vec<Shard>,
    pub generation_sets: Arc<Vec<Vec<TokenSequence>>>,
    pub evaluation_set: Arc<Vec<TokenSequence>>,
    pub validation_set: Arc<Vec<TokenSequence>>,
    /// The original sampled training data, in document order.
    pub reference: Arc<Vec<TokenSequence>>,
}

impl<M> EcosystemState<M> {
    pub fn model_count(&self) -> usize {
        self.training_shards.len()
    }

    pub fn total_training_blocks(&self) -> usize {
        self.training_shards.iter().map(Shard::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Iteration index; `-1` for the unsegmented baseline.
    pub t: i64,
    pub models: usize,
    pub diversity: f64,
    /// Mean test perplexity of each model.
    pub per_model_means: Vec<f64>,
    /// Ecosystem mean of `per_model_means`.
    pub mean: f64,
    pub model_params: Vec<String>,
    /// Support of each model's generated shard against the reference.
    pub support: Vec<SupportStats>,
    /// Support of the pooled generated data against the reference.
    pub pooled_support: Option<SupportStats>,
    /// Pooled per-sequence perplexities of all models on the reference.
    pub distribution: DistributionSummary,
    pub histogram: Histogram,
    pub reference_perplexities: Vec<f64>,
    pub duration_secs: f64,
}

/// Segments the training set into `M` fixed generation sets.
pub fn initialize<M>(
    splits: &CorpusSplits,
    cfg: &EcosystemConfig,
) -> Result<EcosystemState<M>, EcosystemError> {
    cfg.validate()?;
    cfg.check_divides(splits.train_gen.len())?;
    if splits.validation.is_empty() || splits.test.is_empty() {
        return Err(EcosystemError::Config(
            "validation and test sets must be non-empty".into(),
        ));
    }
    let mut order: Vec<usize> = (0..splits.train_gen.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, Purpose::Segmentation, 0, 0));
    let n = splits.train_gen.len() / cfg.models;
    let generation_sets: Vec<Vec<TokenSequence>> = order
        .chunks(n)
        .map(|idx| idx.iter().map(|&i| splits.train_gen[i].clone()).collect())
        .collect();
    let training_shards = generation_sets
        .iter()
        .enumerate()
        .map(|(m, set)| Shard::new(m, set.clone()))
        .collect();
    Ok(EcosystemState {
        t: 0,
        models: (0..cfg.models).map(|_| None).collect(),
        training_shards,
        generation_sets: Arc::new(generation_sets),
        evaluation_set: Arc::new(splits.test.clone()),
        validation_set: Arc::new(splits.validation.clone()),
        reference: Arc::new(splits.train_gen.clone()),
    })
}

/// Shuffles the pooled shards and cuts them into equal contiguous segments.
pub fn redistribute(artificial: Vec<Shard>, seed: u64, t: usize) -> Vec<Shard> {
    let m = artificial.len();
    let mut pool: Vec<TokenSequence> = artificial.into_iter().flat_map(|s| s.sequences).collect();
    pool.shuffle(&mut rng::stream(seed, Purpose::Redistribution, 0, t as u64));
    let n = pool.len() / m;
    let mut shards = Vec::with_capacity(m);
    let mut rest = pool.into_iter();
    for owner in 0..m {
        shards.push(Shard::new(owner, rest.by_ref().take(n).collect()));
    }
    shards
}

fn train_all<L: Learner>(
    learner: &L,
    shards: &[Shard],
    validation: &[TokenSequence],
    prev: &[Option<L::Model>],
) -> Result<Vec<L::Model>, EcosystemError> {
    shards
        .par_iter()
        .zip(prev.par_iter())
        .enumerate()
        .map(|(m, (shard, prev))| {
            learner
                .train(shard, validation, prev.as_ref())
                .map_err(|source| EcosystemError::Model { model: m, source })
        })
        .collect()
}

fn evaluate<L: Learner>(
    learner: &L,
    models: &[L::Model],
    t: i64,
    evaluation: &[TokenSequence],
    reference: &[TokenSequence],
) -> Result<IterationRecord, EcosystemError> {
    let per_model_means: Vec<f64> = models
        .par_iter()
        .map(|m| m.perplexity(evaluation).mean)
        .collect();
    let mean = metrics::ecosystem_mean(&per_model_means)?;
    let per_model_samples: Vec<Vec<f64>> = models
        .par_iter()
        .map(|m| m.perplexity(reference).per_sequence)
        .collect();
    let dist = metrics::PerplexityDistribution::from_sample(per_model_samples.concat())?;
    Ok(IterationRecord {
        t,
        models: models.len(),
        diversity: metrics::equal_weight_diversity(models.len()),
        per_model_means,
        mean,
        model_params: models.iter().map(|m| learner.describe(m)).collect(),
        support: Vec::new(),
        pooled_support: None,
        distribution: dist.summary,
        histogram: dist.histogram,
        reference_perplexities: dist.sample,
        duration_secs: 0.0,
    })
}

/// One full iteration. The input state is never modified; on error nothing
/// of the iteration survives.
pub fn run_iteration<L: Learner>(
    state: &EcosystemState<L::Model>,
    cfg: &EcosystemConfig,
    learner: &L,
) -> Result<(EcosystemState<L::Model>, IterationRecord), EcosystemError> {
    let start = Instant::now();
    let models = train_all(learner, &state.training_shards, &state.validation_set, &state.models)?;
    let mut record = evaluate(
        learner,
        &models,
        state.t as i64,
        &state.evaluation_set,
        &state.reference,
    )?;

    let (len, width) = (cfg.block_size, cfg.beam_width);
    let artificial: Vec<Shard> = models
        .par_iter()
        .zip(state.generation_sets.par_iter())
        .enumerate()
        .map(|(m, (model, set))| {
            let seqs = set
                .par_iter()
                .map(|prompt| model.continuation(prompt.ids(), len, width))
                .collect();
            Shard::new(m, seqs)
        })
        .collect();

    let g = cfg.support_granularity();
    record.support = artificial
        .par_iter()
        .map(|s| metrics::support_stats(&s.sequences, &state.reference, g))
        .collect::<Result<_, _>>()?;
    let pooled: Vec<TokenSequence> = artificial.iter().flat_map(|s| s.sequences.iter().cloned()).collect();
    record.pooled_support = Some(metrics::support_stats(&pooled, &state.reference, g)?);

    let training_shards = redistribute(artificial, cfg.seed, state.t);
    record.duration_secs = start.elapsed().as_secs_f64();
    let next = EcosystemState {
        t: state.t + 1,
        models: models.into_iter().map(Some).collect(),
        training_shards,
        generation_sets: Arc::clone(&state.generation_sets),
        evaluation_set: Arc::clone(&state.evaluation_set),
        validation_set: Arc::clone(&state.validation_set),
        reference: Arc::clone(&state.reference),
    };
    Ok((next, record))
}

/// Fits a single model on the unsegmented training set and evaluates it.
pub fn baseline_record<L: Learner>(
    splits: &CorpusSplits,
    learner: &L,
) -> Result<IterationRecord, EcosystemError> {
    let start = Instant::now();
    let shard = Shard::new(0, splits.train_gen.clone());
    let model = learner
        .train(&shard, &splits.validation, None)
        .map_err(|source| EcosystemError::Model { model: 0, source })?;
    let mut record = evaluate(learner, &[model], -1, &splits.test, &splits.train_gen)?;
    record.duration_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub baseline: Option<IterationRecord>,
    pub records: Vec<IterationRecord>,
}

/// A failed run with everything completed before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub partial: RunOutput,
    pub error: EcosystemError,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "run failed after {} iterations: {}",
            self.partial.records.len(),
            self.error
        )
    }
}

impl std::error::Error for RunFailure {}

/// Progress events passed to the run observer.
pub enum RunEvent<'a, M> {
    Baseline(&'a IterationRecord),
    /// A finished iteration and the state it produced.
    Iteration(&'a IterationRecord, &'a EcosystemState<M>),
}

/// Initializes and runs `cfg.iterations` iterations, reporting each record
/// to `observer` as soon as it exists.
#[allow(clippy::result_large_err)]
pub fn run<L, F>(
    splits: &CorpusSplits,
    cfg: &EcosystemConfig,
    learner: &L,
    mut observer: F,
) -> Result<RunOutput, RunFailure>
where
    L: Learner,
    F: FnMut(RunEvent<'_, L::Model>) -> Result<(), EcosystemError>,
{
    let mut out = RunOutput::default();
    macro_rules! bail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => return Err(RunFailure { partial: out, error }),
            }
        };
    }
    let mut state = bail!(initialize::<L::Model>(splits, cfg));
    if cfg.baseline {
        let rec = bail!(baseline_record(splits, learner));
        bail!(observer(RunEvent::Baseline(&rec)));
        out.baseline = Some(rec);
    }
    for _ in 0..cfg.iterations {
        let (next, rec) = bail!(run_iteration(&state, cfg, learner));
        bail!(observer(RunEvent::Iteration(&rec, &next)));
        out.records.push(rec);
        state = next;
    }
    Ok(out)
}
