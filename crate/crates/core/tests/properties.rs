mod common;

use common::*;
use ecodiv::corpus::{blockify, ingest_text, TokenId, TokenSequence, Vocab};
use ecodiv::gen::beam_continuation;
use ecodiv::lm::NGramModel;
use ecodiv::metrics::{self, DistributionSummary};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn blocks_strategy(vocab: usize) -> impl Strategy<Value = Vec<TokenSequence>> {
    prop::collection::vec(prop::collection::vec(0..vocab as TokenId, 6), 1..12)
        .prop_map(|v| v.into_iter().map(TokenSequence::new).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hill_shannon_permutation_invariant_and_bounded(
        raw in prop::collection::vec(0.01f64..10.0, 1..20),
        seed in any::<u64>(),
    ) {
        let z: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let d = metrics::hill_shannon(&w).unwrap();
        let mut shuffled = w.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let d2 = metrics::hill_shannon(&shuffled).unwrap();
        prop_assert!(rel_err(d, d2) <= 1e-12);
        prop_assert!(d <= w.len() as f64 * (1.0 + 1e-12));
        prop_assert!(d >= 1.0 - 1e-12);
    }

    #[test]
    fn aggregated_mean_ignores_iteration_order(
        xs in prop::collection::vec(1.0f64..1e6, 1..30),
        seed in any::<u64>(),
    ) {
        let a = metrics::aggregated_mean(&xs).unwrap();
        let mut ys = xs.clone();
        ys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(rel_err(a, metrics::aggregated_mean(&ys).unwrap()) <= 1e-12);
    }

    #[test]
    fn sums_are_order_independent(
        xs in prop::collection::vec(1e-3f64..1e9, 1..200),
        seed in any::<u64>(),
    ) {
        let mut ys = xs.clone();
        ys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(rel_err(metrics::sum(&xs), metrics::sum(&ys)) <= 1e-12);
    }

    #[test]
    fn recall_grows_with_reference_blocks(
        reference in blocks_strategy(5),
        generated in blocks_strategy(5),
        take in 0usize..12,
        g in 1usize..4,
    ) {
        let before = metrics::support_stats(&generated, &reference, g).unwrap();
        let mut more = generated.clone();
        more.extend(reference.iter().take(take).cloned());
        let after = metrics::support_stats(&more, &reference, g).unwrap();
        prop_assert!(after.recall >= before.recall);
        prop_assert!((0.0..=1.0).contains(&after.precision));
    }

    #[test]
    fn quantiles_survive_duplication(
        xs in prop::collection::vec(1.0f64..1e4, 1..50),
        times in 2usize..5,
    ) {
        let once = DistributionSummary::from_sample(&xs).unwrap();
        let many: Vec<f64> = (0..times).flat_map(|_| xs.iter().copied()).collect();
        let rep = DistributionSummary::from_sample(&many).unwrap();
        prop_assert_eq!(once.q1, rep.q1);
        prop_assert_eq!(once.median, rep.median);
        prop_assert_eq!(once.q3, rep.q3);
    }

    #[test]
    fn fit_ignores_block_order(blocks in blocks_strategy(7), k in 1usize..4, seed in any::<u64>()) {
        let a = fit_fresh(&blocks, 7, k, 0.1);
        let mut shuffled = blocks.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = fit_fresh(&shuffled, 7, k, 0.1);
        prop_assert!(a == b);
    }

    #[test]
    fn snapshot_roundtrip(blocks in blocks_strategy(9), k in 1usize..4) {
        let m = fit_fresh(&blocks, 9, k, 0.03);
        let mut buf = Vec::new();
        m.write_snapshot(&mut buf).unwrap();
        let back = NGramModel::read_snapshot(buf.as_slice()).unwrap();
        prop_assert!(back == m);
        let mut again = Vec::new();
        back.write_snapshot(&mut again).unwrap();
        prop_assert_eq!(buf, again);
    }

    #[test]
    fn continuation_is_deterministic_and_sized(
        blocks in blocks_strategy(6),
        prompt in prop::collection::vec(0u32..6, 1..5),
        len in 1usize..10,
        width in 1usize..6,
    ) {
        let m = fit_fresh(&blocks, 6, 3, 0.1);
        let a = beam_continuation(&m, &prompt, len, width);
        prop_assert_eq!(a.len(), len);
        prop_assert_eq!(a, beam_continuation(&m, &prompt, len, width));
    }

    #[test]
    fn blockify_keeps_full_blocks_in_order(stream in prop::collection::vec(0u32..50, 0..300), b in 2usize..20) {
        match blockify(&stream, b) {
            Ok(blocks) => {
                prop_assert_eq!(blocks.len(), stream.len() / b);
                let flat: Vec<TokenId> = blocks.iter().flat_map(|s| s.ids().to_vec()).collect();
                prop_assert_eq!(&flat[..], &stream[..blocks.len() * b]);
            }
            Err(_) => prop_assert!(stream.len() < b),
        }
    }

    #[test]
    fn vocab_file_roundtrip(words in prop::collection::vec("[a-z]{1,4}", 1..60)) {
        let text = words.join(" ");
        let (vocab, stream) = ingest_text(&text, 1).unwrap();
        let mut buf = Vec::new();
        vocab.write_to(&mut buf).unwrap();
        let back = Vocab::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.fingerprint(), vocab.fingerprint());
        prop_assert_eq!(back.decode(&stream).join(" "), text);
    }
}
