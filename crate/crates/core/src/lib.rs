//! Ecosystem-level recursive training simulator.
//!
//! A collection of `M` n-gram language models is fitted on disjoint shards of
//! a corpus. Every iteration each model continues the blocks of its fixed
//! generation set with beam search, the generated blocks are pooled, shuffled
//! and dealt back out as the next training shards. Perplexity on held-out
//! text, Hill–Shannon diversity and n-gram support statistics are recorded
//! along the way.
//!
//! Module map:
//!
//! * [`corpus`]: vocabulary, block encoding, splits and seeded subsets.
//! * [`lm`]: backoff n-gram model with additive smoothing.
//! * [`gen`]: beam-search continuation and an exhaustive oracle.
//! * [`ecosystem`]: the train / generate / pool / redistribute loop.
//! * [`metrics`]: diversity, perplexity aggregation, support statistics.
//! * [`runner`]: configuration, persistence, sweeps and reports.

pub mod corpus;
pub mod ecosystem;
pub mod gen;
pub mod lm;
pub mod metrics;
pub mod rng;
pub mod runner;

pub use corpus::{CorpusSplits, Shard, TokenId, TokenSequence, Vocab};
pub use ecosystem::{EcosystemConfig, EcosystemState, IterationRecord};
pub use lm::NGramModel;
