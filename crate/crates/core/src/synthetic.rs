//! Deterministic synthetic datasets for end-to-end checks: a two-class
//! sinusoid-frequency task, a stationary AR(1) panel with a known one-step
//! noise floor, and an anomaly score stream with labeled injections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Two-class windows `(2·n_per_class, w, m)`: class 0 carries one sinusoid
/// cycle per window, class 1 three cycles, with per-sample-per-channel random
/// phase and white noise. Labels alternate 0,1,0,1,… so any prefix is
/// balanced.
pub fn two_class_sinusoids(
    n_per_class: usize,
    w: usize,
    m: usize,
    noise: f64,
    seed: u64,
) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = 2 * n_per_class;
    let mut x = Tensor::zeros(&[total, w, m]);
    let mut labels = Vec::with_capacity(total);
    for b in 0..total {
        let label = b % 2;
        let cycles = if label == 0 { 1.0 } else { 3.0 };
        labels.push(label);
        for j in 0..m {
            let phase: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
            for t in 0..w {
                let angle = std::f64::consts::TAU * cycles * t as f64 / w as f64 + phase;
                let eps: f64 = StandardNormal.sample(&mut rng);
                x.set3(b, t, j, angle.sin() + noise * eps);
            }
        }
    }
    (x, labels)
}

/// Stationary zero-mean AR(1) panel `(len, m)`: channel `j` follows
/// `x_t = φ_j·x_{t−1} + ε_t` with unit-variance innovations, initialized from
/// the stationary distribution.
pub fn ar1_series(len: usize, phis: &[f64], seed: u64) -> Tensor<f64> {
    let m = phis.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::zeros(&[len, m]);
    let mut state: Vec<f64> = phis
        .iter()
        .map(|&phi| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            eps / (1.0 - phi * phi).sqrt()
        })
        .collect();
    for t in 0..len {
        for (j, &phi) in phis.iter().enumerate() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            state[j] = phi * state[j] + eps;
            x.set2(t, j, state[j]);
        }
    }
    x
}

/// Best achievable one-step MSE on the z-scored AR(1) panel, averaged over
/// channels: rescaling to unit variance shrinks the innovation variance to
/// `1 − φ²`.
pub fn ar1_noise_floor(phis: &[f64]) -> f64 {
    phis.iter().map(|&phi| 1.0 - phi * phi).sum::<f64>() / phis.len() as f64
}

/// Unit-mean exponential anomaly scores of length `n` with `n_segments`
/// evenly spaced anomalous runs of `seg_len` points boosted by `boost`.
/// Returns `(scores, ground_truth)`.
pub fn injected_anomaly_scores(
    n: usize,
    n_segments: usize,
    seg_len: usize,
    boost: f64,
    seed: u64,
) -> (Vec<f64>, Vec<bool>) {
    assert!(
        n_segments * (seg_len + 2) < n,
        "stream too short for the requested injections"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let mut gt = vec![false; n];
    let spacing = n / (n_segments + 1);
    for k in 1..=n_segments {
        let start = k * spacing;
        for i in start..(start + seg_len).min(n) {
            scores[i] += boost;
            gt[i] = true;
        }
    }
    (scores, gt)
}
