//! Continuous relaxation of operator choice and connectivity, plus the
//! path and channel sampling used to keep the supernet affordable.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Max-shifted softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| libm::exp(z - mx)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Operator weights of one mixture layer.
pub fn mixture_weights(alpha: &[f64]) -> Vec<f64> {
    softmax(alpha)
}

/// Transmission probabilities over all incoming edges of a node.
pub fn transmission_probs(beta: &[f64]) -> Result<Vec<f64>> {
    if beta.is_empty() {
        return Err(invalid("transmission_probs", "node has no incoming edges"));
    }
    Ok(softmax(beta))
}

/// Tempered sampling distribution `softmax(β / τ)`.
pub fn tempered_probs(beta: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = beta.iter().map(|b| b / tau).collect();
    softmax(&z)
}

/// Draws `n_paths` distinct incoming edges without replacement from the
/// tempered distribution. Returns positions in ascending order; `n_paths`
/// is clamped to the in-degree.
pub fn sample_paths<R: Rng + ?Sized>(beta: &[f64], tau: f64, n_paths: usize, rng: &mut R) -> Vec<usize> {
    let n = n_paths.min(beta.len());
    if n == beta.len() {
        return (0..n).collect();
    }
    let mut weights = tempered_probs(beta, tau);
    let mut chosen = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = weights.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if u < acc {
                break;
            }
        }
        // All remaining mass underflowed: fall back to the first unpicked edge.
        let i = pick.unwrap_or_else(|| (0..weights.len()).find(|i| !chosen.contains(i)).expect("n < len"));
        chosen.push(i);
        weights[i] = 0.0;
    }
    chosen.sort_unstable();
    chosen
}

/// Normalized blending weights over a sampled subset of edges.
pub fn blend_weights(beta: &[f64], subset: &[usize]) -> Vec<f64> {
    let sub: Vec<f64> = subset.iter().map(|&i| beta[i]).collect();
    softmax(&sub)
}

/// Channels of one mixture layer that pass through the operators; the rest
/// bypass it unchanged. Fixed for the lifetime of a search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    channels: usize,
    selected: Vec<usize>,
}

impl ChannelMask {
    /// First `count` channels of a seeded random permutation, sorted.
    pub fn random(channels: usize, count: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..channels).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut selected: Vec<usize> = perm.into_iter().take(count.min(channels)).collect();
        selected.sort_unstable();
        ChannelMask { channels, selected }
    }

    pub fn all(channels: usize) -> Self {
        ChannelMask {
            channels,
            selected: (0..channels).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn is_full(&self) -> bool {
        self.selected.len() == self.channels
    }

    pub fn as_bools(&self) -> Vec<bool> {
        let mut v = alloc::vec![false; self.channels];
        for &i in &self.selected {
            v[i] = true;
        }
        v
    }
}

/// Temperature schedule for path sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            tau_start: 5.0,
            tau_end: 0.1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(invalid(
                "sampler",
                format!("need tau_start >= tau_end > 0, got {} and {}", self.tau_start, self.tau_end),
            ));
        }
        Ok(())
    }

    /// Exponential interpolation from `tau_start` (first epoch) to
    /// `tau_end` (last epoch).
    pub fn tau(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.tau_start;
        }
        let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
        self.tau_start * libm::pow(self.tau_end / self.tau_start, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_weight_closed_forms() {
        let w = mixture_weights(&[0.3; 6]);
        assert!(w.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        let w = mixture_weights(&[core::f64::consts::LN_2, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((w[0] - 2.0 / 7.0).abs() < 1e-15);
        assert!(w[1..].iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn transmission_probs_cases() {
        for l in 1..5 {
            let p = transmission_probs(&alloc::vec![0.2; 4 * l]).unwrap();
            assert!(p.iter().all(|v| (v - 1.0 / (4 * l) as f64).abs() < 1e-15));
        }
        let mut beta = alloc::vec![0.0; 8];
        beta[3] = 50.0;
        let p = transmission_probs(&beta).unwrap();
        assert!(1.0 - p[3] < 1e-20);
        assert!(p.iter().enumerate().all(|(i, v)| i == 3 || *v < 1e-20));
        assert!(transmission_probs(&[]).is_err());
    }

    #[test]
    fn full_sample_ignores_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_paths(&[-9.0, 3.0, 0.0, 1.0], 0.5, 4, &mut rng), [0, 1, 2, 3]);
        assert_eq!(sample_paths(&[-9.0, 3.0], 0.5, 7, &mut rng), [0, 1]);
    }

    #[test]
    fn samples_are_distinct_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let beta: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        for _ in 0..200 {
            let s = sample_paths(&beta, 1.0, 3, &mut rng);
            assert_eq!(s.len(), 3);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn tau_schedule_is_strictly_decreasing() {
        let cfg = SamplerConfig::default();
        let taus: Vec<f64> = (0..10).map(|e| cfg.tau(e, 10)).collect();
        assert_eq!(taus[0], 5.0);
        assert!((taus[9] - 0.1).abs() < 1e-12);
        assert!(taus.windows(2).all(|w| w[1] < w[0]));
        assert!(SamplerConfig { tau_start: 1.0, tau_end: 0.0 }.validate().is_err());
    }

    #[test]
    fn mask_has_requested_arity() {
        let m = ChannelMask::random(16, 4, 9);
        assert_eq!(m.selected().len(), 4);
        assert_eq!(m.as_bools().iter().filter(|b| **b).count(), 4);
        assert_eq!(m, ChannelMask::random(16, 4, 9));
        assert!(ChannelMask::all(5).is_full());
    }
}
