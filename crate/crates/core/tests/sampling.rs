mod common;

use common::rng;
use dcss_core::supernet::relax::{sample_paths, tempered_probs};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const BETA: [f64; 8] = [0.1, -0.4, 0.9, 0.3, -1.2, 0.5, 0.0, 0.2];

#[test]
fn low_temperature_picks_the_dominant_edge() {
    let mut r = rng(1);
    let hits = (0..1000).filter(|_| sample_paths(&BETA, 0.01, 1, &mut r) == [2]).count();
    assert!(hits >= 999, "{hits}");
}

#[test]
fn high_temperature_is_close_to_uniform() {
    let mut r = rng(2);
    let draws = 10_000;
    let mut counts = [0usize; BETA.len()];
    for _ in 0..draws {
        counts[sample_paths(&BETA, 100.0, 1, &mut r)[0]] += 1;
    }
    let expected = draws as f64 / BETA.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((BETA.len() - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat}, p {p}");
}

#[test]
fn first_draw_frequencies_follow_the_tempered_distribution() {
    let mut r = rng(3);
    let tau = 0.5;
    let probs = tempered_probs(&BETA, tau);
    let draws = 20_000;
    let mut counts = [0usize; BETA.len()];
    for _ in 0..draws {
        counts[sample_paths(&BETA, tau, 1, &mut r)[0]] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(&probs)
        .map(|(&c, &q)| (c as f64 - q * draws as f64).powi(2) / (q * draws as f64))
        .sum();
    let p = 1.0 - ChiSquared::new((BETA.len() - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.001, "chi2 {stat}, p {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn samples_are_sorted_distinct_and_in_range(seed in 0u64..u64::MAX, n in 1usize..10, tau in 0.05f64..20.0) {
        let mut r = rng(seed);
        let s = sample_paths(&BETA, tau, n, &mut r);
        prop_assert_eq!(s.len(), n.min(BETA.len()));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| i < BETA.len()));
    }

    #[test]
    fn tempered_probabilities_are_normalized(seed in 0u64..u64::MAX, tau in 0.01f64..100.0, shift in -100.0f64..100.0) {
        let mut r = rng(seed);
        let beta: Vec<f64> = (0..12).map(|_| rand::Rng::random_range(&mut r, -5.0..5.0)).collect();
        let p = tempered_probs(&beta, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = beta.iter().map(|b| b + shift).collect();
        let q = tempered_probs(&shifted, tau);
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
