//! Configuration files, run directories, diversity sweeps and reports.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml        validated config snapshot
//! vocab.txt          one token per line, line number = id
//! records.jsonl      one IterationRecord per line (baseline first, if any)
//! histograms.jsonl   histogram of pooled reference perplexities per record
//! summary.csv        one row per record
//! shards/, models/   only with --persist-shards
//! COMPLETE | FAILED  completion marker
//! ```
//!
//! A sweep directory holds `sweep.toml`, `runs/M{m}_seed{s}/` run
//! directories, `sweep.csv` and `diversity.dat`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusSplits, SplitFractions, SubsetSize, TokenSequence, Vocab};
use crate::ecosystem::{self, EcosystemConfig, IterationRecord, NGramLearner, RunEvent, RunOutput};
use crate::lm::{RefitMode, SelectionGrid};
use crate::metrics;

pub const SUMMARY_HEADER: &str = "# ecosystem-summary v1";
pub const SWEEP_HEADER: &str = "# sweep-summary v1";
pub const SHARD_HEADER: &str = "# shard v1";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Report(String),
}

impl RunnerError {
    /// Process exit code: 1 config, 2 runtime, 3 report.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 1,
            RunnerError::Runtime(_) => 2,
            RunnerError::Report(_) => 3,
        }
    }
}

fn runtime<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> RunnerError + '_ {
    move |e| RunnerError::Runtime(format!("{ctx}: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Single text file, partitioned by `split`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Predefined splits; used instead of `path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default = "default_min_freq")]
    pub min_token_freq: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_subset")]
    pub subset_fraction: f64,
    /// Exact number of sampled training blocks; overrides `subset_fraction`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_blocks: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcosystemSection {
    #[serde(default = "one")]
    pub models: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default)]
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub refit: RefitMode,
    #[serde(default)]
    pub decay: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_order: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_sweep_models")]
    pub models: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_min_freq() -> usize {
    2
}
fn default_block_size() -> usize {
    128
}
fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_subset() -> f64 {
    0.4
}
fn one() -> usize {
    1
}
fn default_iterations() -> usize {
    10
}
fn default_beam() -> usize {
    5
}
fn default_orders() -> Vec<usize> {
    vec![3]
}
fn default_alphas() -> Vec<f64> {
    vec![0.1, 0.01, 0.001]
}
fn default_sweep_models() -> Vec<usize> {
    vec![1, 2, 4, 16]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for EcosystemSection {
    fn default() -> Self {
        EcosystemSection {
            models: 1,
            iterations: default_iterations(),
            seed: 0,
            beam_width: default_beam(),
            baseline: false,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            orders: default_orders(),
            alphas: default_alphas(),
            refit: RefitMode::Fresh,
            decay: 0.0,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            models: default_sweep_models(),
            seeds: default_seeds(),
            workers: None,
        }
    }
}

/// A run config or, with a `[sweep]` section, a sweep spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub ecosystem: EcosystemSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

/// Line of `key` inside `[section]`, 1-based.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section {
            if let Some((k, _)) = l.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl RunConfig {
    /// Parses and validates; relative corpus paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, RunnerError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| RunnerError::Config(format!("config parse error: {e}")))?;
        if let Err((section, key, msg)) = cfg.check() {
            let at = locate(text, section, key)
                .map(|l| format!("line {l}: "))
                .unwrap_or_default();
            return Err(RunnerError::Config(format!("{at}{section}.{key}: {msg}")));
        }
        let base = if base_dir.is_absolute() {
            base_dir.to_path_buf()
        } else {
            std::env::current_dir()
                .map_err(|e| RunnerError::Config(e.to_string()))?
                .join(base_dir)
        };
        for p in [
            &mut cfg.corpus.path,
            &mut cfg.corpus.train,
            &mut cfg.corpus.valid,
            &mut cfg.corpus.test,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn check(&self) -> Result<(), (&'static str, &'static str, String)> {
        let c = &self.corpus;
        let explicit = c.train.is_some() || c.valid.is_some() || c.test.is_some();
        if explicit && c.path.is_some() {
            return Err(("corpus", "path", "use either path or train/valid/test".into()));
        }
        if explicit && !(c.train.is_some() && c.valid.is_some() && c.test.is_some()) {
            return Err(("corpus", "train", "train, valid and test must all be given".into()));
        }
        if !explicit && c.path.is_none() {
            return Err(("corpus", "path", "missing corpus path".into()));
        }
        if c.block_size < 2 {
            return Err(("corpus", "block_size", "must be at least 2".into()));
        }
        if c.split.iter().any(|f| *f < 0.0) || (c.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(("corpus", "split", "fractions must be non-negative and sum to 1".into()));
        }
        if !(c.subset_fraction > 0.0 && c.subset_fraction <= 1.0) {
            return Err(("corpus", "subset_fraction", "must be in (0, 1]".into()));
        }
        if c.budget_blocks == Some(0) {
            return Err(("corpus", "budget_blocks", "must be positive".into()));
        }
        let e = &self.ecosystem;
        if e.models == 0 {
            return Err(("ecosystem", "models", "must be at least 1".into()));
        }
        if e.iterations == 0 {
            return Err(("ecosystem", "iterations", "must be at least 1".into()));
        }
        if e.beam_width == 0 {
            return Err(("ecosystem", "beam_width", "must be at least 1".into()));
        }
        let m = &self.model;
        if m.orders.is_empty() || m.orders.contains(&0) {
            return Err(("model", "orders", "need at least one order >= 1".into()));
        }
        if m.alphas.is_empty() || m.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(("model", "alphas", "need at least one positive alpha".into()));
        }
        if !(0.0..1.0).contains(&m.decay) {
            return Err(("model", "decay", "must be in [0, 1)".into()));
        }
        if self.metrics.support_order == Some(0) {
            return Err(("metrics", "support_order", "must be at least 1".into()));
        }
        if let Some(s) = &self.sweep {
            if s.models.is_empty() || s.models.contains(&0) {
                return Err(("sweep", "models", "need at least one model count >= 1".into()));
            }
            if s.seeds.is_empty() {
                return Err(("sweep", "seeds", "need at least one seed".into()));
            }
            if s.workers == Some(0) {
                return Err(("sweep", "workers", "must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn subset(&self) -> SubsetSize {
        match self.corpus.budget_blocks {
            Some(n) => SubsetSize::Blocks(n),
            None => SubsetSize::Fraction(self.corpus.subset_fraction),
        }
    }

    pub fn ecosystem_config(&self) -> EcosystemConfig {
        EcosystemConfig {
            models: self.ecosystem.models,
            iterations: self.ecosystem.iterations,
            seed: self.ecosystem.seed,
            block_size: self.corpus.block_size,
            beam_width: self.ecosystem.beam_width,
            grid: SelectionGrid {
                orders: self.model.orders.clone(),
                alphas: self.model.alphas.clone(),
                mode: self.model.refit,
                decay: self.model.decay,
            },
            subset: self.subset(),
            support_order: self.metrics.support_order,
            baseline: self.ecosystem.baseline,
        }
    }

    /// The single-run config for one sweep cell.
    pub fn sweep_cell(&self, models: usize, seed: u64) -> RunConfig {
        let mut cell = self.clone();
        cell.sweep = None;
        cell.ecosystem.models = models;
        cell.ecosystem.seed = seed;
        cell
    }
}

fn read_text(path: &Path) -> Result<String, RunnerError> {
    fs::read_to_string(path).map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))
}

fn corpus_err(e: corpus::CorpusError) -> RunnerError {
    RunnerError::Config(format!("corpus: {e}"))
}

/// Reads the corpus files and builds vocabulary and splits.
pub fn load_corpus(cfg: &RunConfig) -> Result<(Vocab, CorpusSplits), RunnerError> {
    let c = &cfg.corpus;
    let seed = cfg.ecosystem.seed;
    if let Some(path) = &c.path {
        let (vocab, stream) = corpus::ingest_text(&read_text(path)?, c.min_token_freq).map_err(corpus_err)?;
        let blocks = corpus::blockify(&stream, c.block_size).map_err(corpus_err)?;
        let fractions = SplitFractions {
            train: c.split[0],
            valid: c.split[1],
            test: c.split[2],
        };
        let splits = corpus::make_splits(&blocks, fractions, cfg.subset(), seed).map_err(corpus_err)?;
        return Ok((vocab, splits));
    }
    let (train, valid, test) = match (&c.train, &c.valid, &c.test) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(RunnerError::Config("corpus: missing split files".into())),
    };
    let (vocab, train_stream) =
        corpus::ingest_text(&read_text(train)?, c.min_token_freq).map_err(corpus_err)?;
    let encode = |p: &Path| -> Result<Vec<TokenSequence>, RunnerError> {
        corpus::blockify(&vocab.encode(&read_text(p)?), c.block_size).map_err(corpus_err)
    };
    let splits = corpus::splits_from_parts(
        &corpus::blockify(&train_stream, c.block_size).map_err(corpus_err)?,
        encode(valid)?,
        encode(test)?,
        cfg.subset(),
        seed,
    )
    .map_err(corpus_err)?;
    Ok((vocab, splits))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub persist_shards: bool,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

/// Summary table, one row per record.
pub fn summary_csv(records: &[IterationRecord]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    out.push_str("t,M,D,mu_t,mu_m,recall,precision,iqr,std\n");
    for r in records {
        let mu_m: Vec<String> = r.per_model_means.iter().map(|&x| fmt_f(x)).collect();
        let (recall, precision) = match &r.pooled_support {
            Some(s) => (fmt_f(s.recall), fmt_f(s.precision)),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            r.models,
            fmt_f(r.diversity),
            fmt_f(r.mean),
            mu_m.join(";"),
            recall,
            precision,
            fmt_f(r.distribution.iqr),
            fmt_f(r.distribution.std)
        );
    }
    out
}

fn histogram_line(r: &IterationRecord) -> String {
    serde_json::json!({
        "t": r.t,
        "M": r.models,
        "edges": r.histogram.edges,
        "counts": r.histogram.counts,
    })
    .to_string()
}

/// Writes a generated shard: header line then one block per line.
pub fn write_shard<W: Write>(
    mut w: W,
    seqs: &[TokenSequence],
    vocab_hash: &str,
    model: usize,
    t: usize,
) -> std::io::Result<()> {
    writeln!(w, "{SHARD_HEADER} vocab={vocab_hash} model={model} t={t}")?;
    for s in seqs {
        let ids: Vec<String> = s.ids().iter().map(|i| i.to_string()).collect();
        writeln!(w, "{}", ids.join(" "))?;
    }
    Ok(())
}

pub fn read_shard<R: BufRead>(r: R) -> Result<Vec<TokenSequence>, String> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h.starts_with(SHARD_HEADER) => {}
        _ => return Err("missing shard header".into()),
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let l = l.map_err(|e| e.to_string())?;
            l.split_whitespace()
                .map(|t| t.parse().map_err(|_| format!("line {}: bad id {t:?}", i + 2)))
                .collect::<Result<Vec<_>, _>>()
                .map(TokenSequence::new)
        })
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<IterationRecord>, String> {
    let file = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str(&line).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))
        })
        .collect()
}

fn all_records(out: &RunOutput) -> Vec<IterationRecord> {
    out.baseline.iter().chain(out.records.iter()).cloned().collect()
}

/// Executes one run into `out_dir`.
pub fn execute_run(cfg: &RunConfig, out_dir: &Path, opts: RunOptions) -> Result<RunOutput, RunnerError> {
    let eco = cfg.ecosystem_config();
    eco.validate().map_err(|e| RunnerError::Config(e.to_string()))?;
    let (vocab, splits) = load_corpus(cfg)?;
    eco.check_divides(splits.train_gen.len())
        .map_err(|e| RunnerError::Config(e.to_string()))?;

    fs::create_dir_all(out_dir).map_err(runtime("create run directory"))?;
    for marker in ["COMPLETE", "FAILED"] {
        let _ = fs::remove_file(out_dir.join(marker));
    }
    fs::write(out_dir.join("config.toml"), cfg.snapshot()).map_err(runtime("write config snapshot"))?;
    let mut vocab_file = Vec::new();
    vocab.write_to(&mut vocab_file).map_err(runtime("vocab"))?;
    fs::write(out_dir.join("vocab.txt"), vocab_file).map_err(runtime("write vocab"))?;
    let vocab_hash = vocab.fingerprint();

    let mut records_out = BufWriter::new(
        File::create(out_dir.join("records.jsonl")).map_err(runtime("create records.jsonl"))?,
    );
    if opts.persist_shards {
        fs::create_dir_all(out_dir.join("shards")).map_err(runtime("create shards dir"))?;
        fs::create_dir_all(out_dir.join("models")).map_err(runtime("create models dir"))?;
    }
    let learner = NGramLearner {
        vocab_size: vocab.len(),
        grid: eco.grid.clone(),
    };

    let io_err = |e: std::io::Error| ecosystem::EcosystemError::Observer(e.to_string());
    let result = ecosystem::run(&splits, &eco, &learner, |event| {
        let record = match &event {
            RunEvent::Baseline(r) | RunEvent::Iteration(r, _) => *r,
        };
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(records_out, "{line}").map_err(io_err)?;
        records_out.flush().map_err(io_err)?;
        if let (true, RunEvent::Iteration(_, state)) = (opts.persist_shards, &event) {
            let t = state.t - 1;
            for (m, shard) in state.training_shards.iter().enumerate() {
                let f = File::create(out_dir.join(format!("shards/t{t}_m{m}.txt"))).map_err(io_err)?;
                write_shard(BufWriter::new(f), &shard.sequences, &vocab_hash, m, t + 1).map_err(io_err)?;
            }
            for (m, model) in state.models.iter().enumerate() {
                if let Some(model) = model {
                    let f = File::create(out_dir.join(format!("models/t{t}_m{m}.ngram"))).map_err(io_err)?;
                    model.write_snapshot(BufWriter::new(f)).map_err(io_err)?;
                }
            }
        }
        Ok(())
    });
    drop(records_out);

    let (output, failure) = match result {
        Ok(o) => (o, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    let records = all_records(&output);
    fs::write(out_dir.join("summary.csv"), summary_csv(&records)).map_err(runtime("write summary"))?;
    let hist: String = records.iter().map(|r| histogram_line(r) + "\n").collect();
    fs::write(out_dir.join("histograms.jsonl"), hist).map_err(runtime("write histograms"))?;
    match failure {
        None => {
            fs::write(out_dir.join("COMPLETE"), "").map_err(runtime("write marker"))?;
            Ok(output)
        }
        Some(e) => {
            let _ = fs::write(out_dir.join("FAILED"), format!("{e}\n"));
            Err(RunnerError::Runtime(format!("run failed: {e}")))
        }
    }
}

/// Ecosystem means of the non-baseline records, in iteration order.
pub fn trajectory(records: &[IterationRecord]) -> Vec<f64> {
    records.iter().filter(|r| r.t >= 0).map(|r| r.mean).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub models: usize,
    pub diversity: f64,
    pub seed: u64,
    pub aggregated: Option<f64>,
    pub rate: Option<f64>,
    pub status: String,
}

fn cell_dir(out_dir: &Path, models: usize, seed: u64) -> PathBuf {
    out_dir.join("runs").join(format!("M{models}_seed{seed}"))
}

fn completed(dir: &Path, snapshot: &str) -> bool {
    dir.join("COMPLETE").is_file()
        && fs::read_to_string(dir.join("config.toml")).is_ok_and(|s| s == snapshot)
}

fn row_from(models: usize, seed: u64, records: Result<Vec<IterationRecord>, String>) -> SweepRow {
    let diversity = metrics::equal_weight_diversity(models);
    match records {
        Ok(recs) => {
            let traj = trajectory(&recs);
            SweepRow {
                models,
                diversity,
                seed,
                aggregated: metrics::aggregated_mean(&traj).ok(),
                rate: metrics::perplexity_rate(&traj).ok(),
                status: "ok".into(),
            }
        }
        Err(e) => SweepRow {
            models,
            diversity,
            seed,
            aggregated: None,
            rate: None,
            status: format!("failed: {}", e.replace([',', '\n'], " ")),
        },
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |x: Option<f64>| x.map(fmt_f).unwrap_or_default();
    let mut out = format!("{SWEEP_HEADER}\nM,D,seed,mu_T,final_rate,status\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.models,
            fmt_f(r.diversity),
            r.seed,
            opt(r.aggregated),
            opt(r.rate),
            r.status
        );
    }
    out
}

/// `D` against the mean over seeds of `mu_T`, gnuplot-ready.
pub fn diversity_dat(rows: &[SweepRow]) -> String {
    let mut by_m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        if !order.contains(&r.models) {
            order.push(r.models);
        }
        if let Some(a) = r.aggregated {
            by_m.entry(r.models).or_default().push(a);
        }
    }
    let mut out = String::from("# D mu_T_mean seeds\n");
    for m in order {
        let vals = by_m.get(&m).cloned().unwrap_or_default();
        if vals.is_empty() {
            continue;
        }
        let _ = writeln!(
            out,
            "{} {} {}",
            fmt_f(metrics::equal_weight_diversity(m)),
            fmt_f(metrics::mean(&vals)),
            vals.len()
        );
    }
    out
}

/// Runs every (M, seed) cell of a sweep spec. Cells whose directory already
/// holds a matching config snapshot and a completion marker are reused.
pub fn execute_sweep(spec: &RunConfig, out_dir: &Path, opts: RunOptions) -> Result<Vec<SweepRow>, RunnerError> {
    let sweep = spec
        .sweep
        .clone()
        .ok_or_else(|| RunnerError::Config("sweep spec needs a [sweep] section".into()))?;
    // fail fast on divisibility before any run starts
    let (_, splits) = load_corpus(spec)?;
    for &m in &sweep.models {
        spec.sweep_cell(m, sweep.seeds[0])
            .ecosystem_config()
            .check_divides(splits.train_gen.len())
            .map_err(|e| RunnerError::Config(e.to_string()))?;
    }
    fs::create_dir_all(out_dir.join("runs")).map_err(runtime("create sweep directory"))?;
    fs::write(out_dir.join("sweep.toml"), spec.snapshot()).map_err(runtime("write sweep snapshot"))?;

    let cells: Vec<(usize, u64)> = sweep
        .models
        .iter()
        .flat_map(|&m| sweep.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let run_cell = |&(m, seed): &(usize, u64)| -> SweepRow {
        let cell = spec.sweep_cell(m, seed);
        let dir = cell_dir(out_dir, m, seed);
        let records = if completed(&dir, &cell.snapshot()) {
            read_records(&dir.join("records.jsonl"))
        } else {
            execute_run(&cell, &dir, opts)
                .map(|o| all_records(&o))
                .map_err(|e| e.to_string())
        };
        row_from(m, seed, records)
    };
    let workers = sweep.workers.unwrap_or_else(rayon::current_num_threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(runtime("thread pool"))?;
    let rows: Vec<SweepRow> = pool.install(|| cells.par_iter().map(run_cell).collect());

    fs::write(out_dir.join("sweep.csv"), sweep_csv(&rows)).map_err(runtime("write sweep.csv"))?;
    fs::write(out_dir.join("diversity.dat"), diversity_dat(&rows)).map_err(runtime("write diversity.dat"))?;
    Ok(rows)
}

fn histogram_dat(r: &IterationRecord) -> String {
    let mut out = format!("# t={} M={} lower_edge count\n", r.t, r.models);
    for (e, c) in r.histogram.edges.iter().zip(&r.histogram.counts) {
        let _ = writeln!(out, "{} {}", fmt_f(*e), c);
    }
    out
}

fn run_trajectory_dat(records: &[IterationRecord]) -> String {
    let m = records.first().map_or(0, |r| r.models);
    let mut out = String::from("# t mu_t");
    for i in 0..m {
        let _ = write!(out, " mu_{i}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{} {}", r.t, fmt_f(r.mean));
        for x in &r.per_model_means {
            let _ = write!(out, " {}", fmt_f(*x));
        }
        out.push('\n');
    }
    out
}

fn describe_run(label: &str, records: &[IterationRecord]) -> String {
    let traj = trajectory(records);
    let mut out = String::new();
    let m = records.first().map_or(0, |r| r.models);
    let _ = writeln!(out, "{label}: M={m} D={} iterations={}", fmt_f(metrics::equal_weight_diversity(m)), traj.len());
    if let Some(b) = records.iter().find(|r| r.t < 0) {
        let _ = writeln!(out, "  baseline mu={}", fmt_f(b.mean));
    }
    for r in records.iter().filter(|r| r.t >= 0) {
        let (rec, prec) = r
            .pooled_support
            .map_or((f64::NAN, f64::NAN), |s| (s.recall, s.precision));
        let _ = writeln!(
            out,
            "  t={:<3} mu={} recall={} precision={} iqr={} std={}",
            r.t,
            fmt_f(r.mean),
            fmt_f(rec),
            fmt_f(prec),
            fmt_f(r.distribution.iqr),
            fmt_f(r.distribution.std)
        );
    }
    if let Ok(a) = metrics::aggregated_mean(&traj) {
        let _ = writeln!(out, "  mu_T={}", fmt_f(a));
    }
    if let Ok(rate) = metrics::perplexity_rate(&traj) {
        let _ = writeln!(out, "  final_rate={}", fmt_f(rate));
    }
    out
}

/// Files written by [`report`], relative to the report directory.
#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub text: String,
    pub files: Vec<PathBuf>,
}

fn write_report_files(dir: &Path, files: &[(String, String)], text: &str) -> Result<ReportOutput, RunnerError> {
    let report_dir = dir.join("report");
    fs::create_dir_all(&report_dir).map_err(|e| RunnerError::Report(format!("{}: {e}", report_dir.display())))?;
    let mut written = Vec::new();
    for (name, content) in files.iter().chain(std::iter::once(&("summary.txt".to_string(), text.to_string()))) {
        let p = report_dir.join(name);
        fs::write(&p, content).map_err(|e| RunnerError::Report(format!("{}: {e}", p.display())))?;
        written.push(PathBuf::from(name));
    }
    Ok(ReportOutput {
        text: text.to_string(),
        files: written,
    })
}

fn run_report_files(prefix: &str, records: &[IterationRecord]) -> Vec<(String, String)> {
    let mut files = vec![(format!("trajectory{prefix}.dat"), run_trajectory_dat(records))];
    let iters: Vec<&IterationRecord> = records.iter().filter(|r| r.t >= 0).collect();
    if let (Some(first), Some(last)) = (iters.first(), iters.last()) {
        files.push((format!("hist{prefix}_t{}.dat", first.t), histogram_dat(first)));
        if last.t != first.t {
            files.push((format!("hist{prefix}_t{}.dat", last.t), histogram_dat(last)));
        }
    }
    files
}

/// Renders plot data and a text summary for a run or sweep directory into
/// `<dir>/report/`.
pub fn report(dir: &Path) -> Result<ReportOutput, RunnerError> {
    if dir.join("sweep.toml").is_file() {
        return report_sweep(dir);
    }
    let path = dir.join("records.jsonl");
    let records = read_records(&path).map_err(|e| RunnerError::Report(format!("invalid records: {e}")))?;
    if records.is_empty() {
        return Err(RunnerError::Report(format!("invalid records: {} is empty", path.display())));
    }
    let text = describe_run(&dir.display().to_string(), &records);
    write_report_files(dir, &run_report_files("", &records), &text)
}

fn report_sweep(dir: &Path) -> Result<ReportOutput, RunnerError> {
    let spec_text = fs::read_to_string(dir.join("sweep.toml"))
        .map_err(|e| RunnerError::Report(format!("sweep.toml: {e}")))?;
    let spec: RunConfig = toml::from_str(&spec_text)
        .map_err(|e| RunnerError::Report(format!("sweep.toml: {e}")))?;
    let sweep = spec.sweep.clone().unwrap_or_default();

    let mut bad = Vec::new();
    let mut runs: Vec<(usize, u64, Vec<IterationRecord>)> = Vec::new();
    for &m in &sweep.models {
        for &seed in &sweep.seeds {
            let path = cell_dir(dir, m, seed).join("records.jsonl");
            match read_records(&path) {
                Ok(r) if !r.is_empty() => runs.push((m, seed, r)),
                Ok(_) => bad.push(format!("{} (empty)", path.display())),
                Err(e) => bad.push(e),
            }
        }
    }
    if !bad.is_empty() {
        return Err(RunnerError::Report(format!("invalid records:\n  {}", bad.join("\n  "))));
    }

    let mut files = Vec::new();
    let mut text = String::new();
    for &m in &sweep.models {
        let cells: Vec<&(usize, u64, Vec<IterationRecord>)> = runs.iter().filter(|r| r.0 == m).collect();
        let mut traj = String::from("# t");
        for c in &cells {
            let _ = write!(traj, " seed{}", c.1);
        }
        traj.push('\n');
        let ts: Vec<i64> = cells[0].2.iter().map(|r| r.t).collect();
        for (i, t) in ts.iter().enumerate() {
            let _ = write!(traj, "{t}");
            for c in &cells {
                match c.2.get(i) {
                    Some(r) => {
                        let _ = write!(traj, " {}", fmt_f(r.mean));
                    }
                    None => traj.push_str(" nan"),
                }
            }
            traj.push('\n');
        }
        files.push((format!("trajectory_M{m}.dat"), traj));
        let first = cells[0];
        for (name, content) in run_report_files(&format!("_M{m}_seed{}", first.1), &first.2) {
            if name.starts_with("hist") {
                files.push((name, content));
            }
        }
        for c in &cells {
            text.push_str(&describe_run(&format!("M{}_seed{}", c.0, c.1), &c.2));
        }
    }
    let rows: Vec<SweepRow> = runs.iter().map(|(m, s, r)| row_from(*m, *s, Ok(r.clone()))).collect();
    files.push(("diversity.dat".into(), diversity_dat(&rows)));
    text.push_str("\nD vs mu_T (mean over seeds):\n");
    for line in diversity_dat(&rows).lines().skip(1) {
        let _ = writeln!(text, "  {line}");
    }
    write_report_files(dir, &files, &text)
}
