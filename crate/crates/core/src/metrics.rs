//! Diversity, perplexity aggregation, distribution statistics and n-gram
//! support measures.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, TokenSequence};
use crate::lm::LanguageModel;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("weights must be finite and non-negative")]
    InvalidWeights,
    #[error("all weights are zero")]
    ZeroWeights,
    #[error("empty input")]
    Empty,
    #[error("need at least two points, got {0}")]
    TooShort(usize),
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("reference has no {0}-grams")]
    EmptyReference(usize),
}

/// Fixed-order compensated (Neumaier) sum.
pub fn sum(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// Arithmetic mean; NaN for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    sum(xs) / xs.len() as f64
}

/// Hill number of order one: `exp(-sum w ln w)`. Weights are renormalised
/// when they do not already sum to one; zero weights contribute nothing.
pub fn hill_shannon(weights: &[f64]) -> Result<f64, MetricsError> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(MetricsError::InvalidWeights);
    }
    let total = sum(weights);
    if total <= 0.0 {
        return Err(MetricsError::ZeroWeights);
    }
    let scale = if (total - 1.0).abs() <= 1e-9 { 1.0 } else { total };
    let terms: Vec<f64> = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / scale;
            p * p.ln()
        })
        .collect();
    Ok((-sum(&terms)).exp())
}

/// Diversity of `m` equally weighted models.
pub fn equal_weight_diversity(m: usize) -> f64 {
    hill_shannon(&vec![1.0 / m as f64; m]).unwrap_or(0.0)
}

/// Mean of the per-model mean perplexities at one iteration.
pub fn ecosystem_mean(per_model_means: &[f64]) -> Result<f64, MetricsError> {
    if per_model_means.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(mean(per_model_means))
}

/// Mean of the per-iteration ecosystem means.
pub fn aggregated_mean(per_iteration_means: &[f64]) -> Result<f64, MetricsError> {
    if per_iteration_means.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(mean(per_iteration_means))
}

/// Least-squares slope of the trajectory against iteration index over its
/// final `ceil(T/2)` points (never fewer than two).
pub fn perplexity_rate(trajectory: &[f64]) -> Result<f64, MetricsError> {
    let n = trajectory.len();
    if n < 2 {
        return Err(MetricsError::TooShort(n));
    }
    let window = n.div_ceil(2).max(2);
    let start = n - window;
    let xs: Vec<f64> = (start..n).map(|t| t as f64).collect();
    let ys = &trajectory[start..];
    let x_mean = mean(&xs);
    let y_mean = mean(ys);
    let sxy: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - x_mean) * (y - y_mean)).collect();
    let sxx: Vec<f64> = xs.iter().map(|x| (x - x_mean) * (x - x_mean)).collect();
    Ok(sum(&sxy) / sum(&sxx))
}

/// Lower edges of the log-spaced histogram bins: `10^(i/8)` for `i = 0..=48`.
/// The last bin is open-ended; values below 1 land in the first bin.
pub fn histogram_edges() -> Vec<f64> {
    (0..=48).map(|i| 10f64.powf(i as f64 / 8.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(sample: &[f64]) -> Self {
        let edges = histogram_edges();
        let mut counts = vec![0u64; edges.len()];
        for &x in sample {
            let bin = edges.partition_point(|&e| e <= x).saturating_sub(1);
            counts[bin] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
}

/// Inverse of the empirical CDF: the smallest sample value `x` with
/// `F(x) >= p`. Unchanged when every value is repeated the same number of times.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p * n as f64 - 1e-12).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

impl DistributionSummary {
    pub fn from_sample(sample: &[f64]) -> Result<Self, MetricsError> {
        if sample.is_empty() {
            return Err(MetricsError::Empty);
        }
        let m = mean(sample);
        let dev: Vec<f64> = sample.iter().map(|x| (x - m) * (x - m)).collect();
        let std = mean(&dev).sqrt();
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile(&sorted, 0.25);
        let q3 = quantile(&sorted, 0.75);
        Ok(DistributionSummary {
            count: sample.len(),
            mean: m,
            std,
            q1,
            median: quantile(&sorted, 0.5),
            q3,
            iqr: q3 - q1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityDistribution {
    pub sample: Vec<f64>,
    pub summary: DistributionSummary,
    pub histogram: Histogram,
}

impl PerplexityDistribution {
    pub fn from_sample(sample: Vec<f64>) -> Result<Self, MetricsError> {
        let summary = DistributionSummary::from_sample(&sample)?;
        let histogram = Histogram::build(&sample);
        Ok(PerplexityDistribution {
            sample,
            summary,
            histogram,
        })
    }
}

/// Pools the per-sequence perplexities of every model over `reference`, in
/// model order.
pub fn perplexity_distribution<M: LanguageModel>(
    models: &[M],
    reference: &[TokenSequence],
) -> Result<PerplexityDistribution, MetricsError> {
    if models.is_empty() || reference.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sample = models
        .iter()
        .flat_map(|m| reference.iter().map(move |s| m.sequence_perplexity(s.ids())))
        .collect();
    PerplexityDistribution::from_sample(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportStats {
    pub recall: f64,
    pub precision: f64,
    pub granularity: usize,
}

/// Distinct `g`-grams inside each block (never spanning two blocks).
pub fn ngram_types(seqs: &[TokenSequence], g: usize) -> HashSet<&[TokenId]> {
    seqs.iter().flat_map(|s| s.ids().windows(g)).collect()
}

/// Type-level support overlap between generated and reference data.
///
/// `recall` is the share of reference `g`-gram types that occur in the
/// generated data, `precision` the share of generated types that occur in the
/// reference. Generated data without any `g`-gram has precision 0.
pub fn support_stats(
    generated: &[TokenSequence],
    reference: &[TokenSequence],
    g: usize,
) -> Result<SupportStats, MetricsError> {
    if g == 0 {
        return Err(MetricsError::InvalidOrder);
    }
    let reference = ngram_types(reference, g);
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference(g));
    }
    let generated = ngram_types(generated, g);
    let shared = generated.iter().filter(|t| reference.contains(*t)).count() as f64;
    Ok(SupportStats {
        recall: shared / reference.len() as f64,
        precision: if generated.is_empty() {
            0.0
        } else {
            shared / generated.len() as f64
        },
        granularity: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(v: &[&[TokenId]]) -> Vec<TokenSequence> {
        v.iter().map(|s| TokenSequence::new(s.to_vec())).collect()
    }

    #[test]
    fn diversity_basics() {
        assert_eq!(hill_shannon(&[1.0]).unwrap(), 1.0);
        assert!((hill_shannon(&[0.25; 4]).unwrap() - 4.0).abs() < 1e-12);
        // renormalised
        assert!((hill_shannon(&[2.0, 2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!((hill_shannon(&[0.5, 0.5, 0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(hill_shannon(&[0.0, 0.0]), Err(MetricsError::ZeroWeights));
        assert_eq!(hill_shannon(&[-0.1, 1.1]), Err(MetricsError::InvalidWeights));
    }

    #[test]
    fn means() {
        assert_eq!(ecosystem_mean(&[10.0]).unwrap(), 10.0);
        assert_eq!(ecosystem_mean(&[8.0, 12.0]).unwrap(), 10.0);
        assert_eq!(ecosystem_mean(&[]), Err(MetricsError::Empty));
        assert_eq!(aggregated_mean(&[3.5]).unwrap(), 3.5);
        assert_eq!(aggregated_mean(&[7.25; 10]).unwrap(), 7.25);
        let series: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(aggregated_mean(&series).unwrap(), 5.5);
    }

    #[test]
    fn rate_on_exact_lines() {
        assert_eq!(perplexity_rate(&[4.0; 10]).unwrap(), 0.0);
        let line: Vec<f64> = (0..10).map(|t| 2.0 * t as f64).collect();
        assert!((perplexity_rate(&line).unwrap() - 2.0).abs() < 1e-12);
        assert!((perplexity_rate(&[1.0, 3.0]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(perplexity_rate(&[1.0]), Err(MetricsError::TooShort(1)));
    }

    #[test]
    fn rate_uses_final_half() {
        // flat then rising: only the last five points matter
        let traj = [9.0, 1.0, 7.0, 3.0, 5.0, 10.0, 11.0, 12.0, 13.0, 14.0];
        assert!((perplexity_rate(&traj).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_single_value() {
        let d = PerplexityDistribution::from_sample(vec![42.0]).unwrap();
        assert_eq!(d.summary.count, 1);
        assert_eq!(d.summary.std, 0.0);
        assert_eq!(d.summary.iqr, 0.0);
        assert_eq!(d.histogram.counts.iter().sum::<u64>(), 1);
    }

    #[test]
    fn quantiles_invariant_under_duplication() {
        let sample = vec![1.0, 5.0, 2.0, 9.0, 3.0, 7.0, 4.0];
        let one = DistributionSummary::from_sample(&sample).unwrap();
        let mut rep = Vec::new();
        for _ in 0..4 {
            rep.extend_from_slice(&sample);
        }
        let four = DistributionSummary::from_sample(&rep).unwrap();
        assert_eq!(one.q1, four.q1);
        assert_eq!(one.q3, four.q3);
        assert_eq!(one.iqr, four.iqr);
        assert!((one.std - four.std).abs() < 1e-12);
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::build(&[0.5, 1.0, 1.2, 10.0, 1e7]);
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.counts[8], 1);
        assert_eq!(*h.counts.last().unwrap(), 1);
    }

    #[test]
    fn support_identity_and_subset() {
        let r = seqs(&[&[1, 2, 3, 4], &[4, 3, 2, 1], &[5, 6, 7, 8]]);
        let s = support_stats(&r, &r, 2).unwrap();
        assert_eq!((s.recall, s.precision), (1.0, 1.0));
        let half = support_stats(&r[..1], &r, 2).unwrap();
        assert!(half.recall <= 1.0);
        assert_eq!(half.precision, 1.0);
        assert_eq!(half.recall, 3.0 / 9.0);
    }

    #[test]
    fn support_hand_count() {
        // reference: 10 distinct unigram types 0..10
        let reference = seqs(&[&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]]);
        // generated: 7 shared (0..7) + 3 novel (20, 21, 22)
        let generated = seqs(&[&[0, 1, 2, 3, 4, 5, 6, 20, 21, 22]]);
        let s = support_stats(&generated, &reference, 1).unwrap();
        assert!((s.recall - 0.7).abs() < 1e-15);
        assert!((s.precision - 0.7).abs() < 1e-15);
    }

    #[test]
    fn support_errors() {
        let r = seqs(&[&[1, 2]]);
        assert_eq!(support_stats(&r, &r, 0), Err(MetricsError::InvalidOrder));
        assert_eq!(support_stats(&r, &r, 3), Err(MetricsError::EmptyReference(3)));
        assert_eq!(support_stats(&seqs(&[&[1]]), &r, 2).unwrap().precision, 0.0);
    }
}
