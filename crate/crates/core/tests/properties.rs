//! Property tests over randomized inputs.

use proptest::prelude::*;

use mmsum_core::io::align::resample_to_clock;
use mmsum_core::io::feature;
use mmsum_core::rouge::{lcs_len, rouge_l, rouge_n};
use mmsum_core::tensor::Tensor;

fn token_vec(max_len: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(str::to_owned),
        0..max_len,
    )
}

proptest! {
    #[test]
    fn feature_file_bytes_round_trip(
        rows in 0usize..6,
        cols in 0usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = mmsum_core::Rng::new(seed);
        let t = Tensor::rand_uniform(vec![rows, cols], -100.0, 100.0, &mut rng);
        let bytes = feature::to_bytes(&t).unwrap();
        let back = feature::from_bytes(&bytes, std::path::Path::new("<mem>")).unwrap();
        prop_assert_eq!(feature::to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn resample_is_identity_at_equal_rates(
        rows in 1usize..20,
        cols in 1usize..5,
        rate in 0.25f64..50.0,
        seed in any::<u64>(),
    ) {
        let mut rng = mmsum_core::Rng::new(seed);
        let t = Tensor::rand_uniform(vec![rows, cols], -1.0, 1.0, &mut rng);
        let out = resample_to_clock(&t, rate, rate).unwrap();
        prop_assert_eq!(out, t);
    }

    #[test]
    fn resample_twice_by_same_rates_is_idempotent(
        rows in 1usize..16,
        seed in any::<u64>(),
    ) {
        // Downsample then downsample again with equal rates: second pass is
        // the identity because the stream already sits on the clock.
        let mut rng = mmsum_core::Rng::new(seed);
        let t = Tensor::rand_uniform(vec![rows, 3], -1.0, 1.0, &mut rng);
        let once = resample_to_clock(&t, 4.0, 2.0).unwrap();
        let twice = resample_to_clock(&once, 2.0, 2.0).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn rouge_scores_bounded(cand in token_vec(12), refr in token_vec(12)) {
        for n in [1usize, 2] {
            let s = rouge_n(&cand, &refr, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.precision));
            prop_assert!((0.0..=1.0).contains(&s.recall));
            prop_assert!((0.0..=1.0).contains(&s.f1));
        }
        let s = rouge_l(&cand, &refr);
        prop_assert!((0.0..=1.0).contains(&s.f1));
    }

    #[test]
    fn lcs_symmetric_and_bounded(a in token_vec(10), b in token_vec(10)) {
        let l = lcs_len(&a, &b);
        prop_assert_eq!(l, lcs_len(&b, &a));
        prop_assert!(l <= a.len().min(b.len()));
    }

    #[test]
    fn softmax_rows_are_stochastic(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
    ) {
        let mut rng = mmsum_core::Rng::new(seed);
        let mut tape = mmsum_core::tape::Tape::new();
        let x = tape.input(Tensor::rand_uniform(vec![rows, cols], -40.0, 40.0, &mut rng));
        let y = tape.softmax(x, 1).unwrap();
        for i in 0..rows {
            let row = tape.value(y).row(i);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
