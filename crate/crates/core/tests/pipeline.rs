mod common;

use std::collections::HashSet;

use common::*;
use ecodiv::corpus::{splits_from_parts, SubsetSize, TokenSequence};
use ecodiv::ecosystem::{self, initialize, run, EcosystemConfig, EcosystemState, NGramLearner, RunEvent};
use ecodiv::lm::{NGramModel, SelectionGrid};
use ecodiv::CorpusSplits;

fn distinct_splits(train: usize, vocab: usize) -> CorpusSplits {
    let mut r = rng(9);
    let blocks = random_blocks(&mut r, train + 20, 4, vocab);
    splits_from_parts(
        &blocks[..train],
        blocks[train..train + 10].to_vec(),
        blocks[train + 10..].to_vec(),
        SubsetSize::Fraction(1.0),
        0,
    )
    .unwrap()
}

#[test]
fn segmentation_of_7500_blocks_into_four_sets() {
    let splits = distinct_splits(7500, 1000);
    let cfg = EcosystemConfig {
        models: 4,
        block_size: 4,
        ..Default::default()
    };
    let state: EcosystemState<NGramModel> = initialize(&splits, &cfg).unwrap();
    assert_eq!(state.generation_sets.len(), 4);
    let mut seen: Vec<&TokenSequence> = Vec::new();
    for set in state.generation_sets.iter() {
        assert_eq!(set.len(), 1875);
        seen.extend(set.iter());
    }
    let mut a: Vec<&TokenSequence> = seen.clone();
    let mut b: Vec<&TokenSequence> = splits.train_gen.iter().collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
    let positions: HashSet<*const TokenSequence> = seen.iter().map(|s| *s as *const _).collect();
    assert_eq!(positions.len(), 7500);

    let again: EcosystemState<NGramModel> = initialize(&splits, &cfg).unwrap();
    assert_eq!(state.generation_sets, again.generation_sets);
}

fn small_setup() -> (CorpusSplits, EcosystemConfig, NGramLearner) {
    let text = synthetic_text(20_000, 300, 4);
    let (vocab, stream) = ecodiv::corpus::ingest_text(&text, 2).unwrap();
    let blocks = ecodiv::corpus::blockify(&stream, 16).unwrap();
    let splits =
        ecodiv::corpus::make_splits(&blocks, Default::default(), SubsetSize::Blocks(96), 3).unwrap();
    let cfg = EcosystemConfig {
        models: 2,
        iterations: 3,
        seed: 5,
        block_size: 16,
        beam_width: 3,
        grid: SelectionGrid {
            orders: vec![2, 3],
            alphas: vec![0.1, 0.01],
            ..Default::default()
        },
        baseline: true,
        ..Default::default()
    };
    let learner = NGramLearner {
        vocab_size: vocab.len(),
        grid: cfg.grid.clone(),
    };
    (splits, cfg, learner)
}

#[test]
fn fixed_sets_stay_fixed_and_budget_is_conserved() {
    let (splits, cfg, learner) = small_setup();
    let first: EcosystemState<NGramModel> = initialize(&splits, &cfg).unwrap();
    let mut checked = 0;
    run(&splits, &cfg, &learner, |ev| {
        if let RunEvent::Iteration(_, state) = ev {
            assert_eq!(state.generation_sets, first.generation_sets);
            assert_eq!(state.evaluation_set, first.evaluation_set);
            assert_eq!(state.validation_set, first.validation_set);
            assert_eq!(state.total_training_blocks(), 96);
            assert!(state.training_shards.iter().all(|s| s.len() == 48));
            checked += 1;
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(checked, 3);
}

#[test]
fn runs_are_deterministic() {
    let (splits, cfg, learner) = small_setup();
    let strip = |mut out: ecosystem::RunOutput| {
        for r in out.records.iter_mut().chain(out.baseline.iter_mut()) {
            r.duration_secs = 0.0;
        }
        out
    };
    let a = strip(run(&splits, &cfg, &learner, |_| Ok(())).unwrap());
    let b = strip(run(&splits, &cfg, &learner, |_| Ok(())).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 3);
    assert_eq!(a.baseline.as_ref().unwrap().t, -1);
}

#[test]
fn single_model_first_iteration_matches_full_fit() {
    let (splits, mut cfg, learner) = small_setup();
    cfg.models = 1;
    cfg.iterations = 1;
    let out = run(&splits, &cfg, &learner, |_| Ok(())).unwrap();
    assert_eq!(out.records.len(), 1);
    let base = out.baseline.unwrap();
    assert_eq!(out.records[0].mean, base.mean);
    assert_eq!(out.records[0].per_model_means, base.per_model_means);
}

#[test]
fn failing_iteration_keeps_earlier_records() {
    let (splits, cfg, learner) = small_setup();
    let mut n = 0;
    let err = run(&splits, &cfg, &learner, |ev| {
        if matches!(ev, RunEvent::Iteration(..)) {
            n += 1;
            if n == 2 {
                return Err(ecosystem::EcosystemError::Observer("disk full".into()));
            }
        }
        Ok(())
    })
    .unwrap_err();
    assert_eq!(err.partial.records.len(), 1);
    assert!(err.partial.baseline.is_some());
}

#[test]
fn indivisible_budget_is_rejected_before_work() {
    let (splits, mut cfg, learner) = small_setup();
    cfg.models = 5;
    let err = run(&splits, &cfg, &learner, |_| panic!("no work expected")).unwrap_err();
    assert!(matches!(err.error, ecosystem::EcosystemError::Config(_)));
}
