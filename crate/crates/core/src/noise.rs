//! Multiplicative uniform noise `Phi^delta = Phi (1 + delta (2 r - 1))`.
//!
//! Draws come from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with
//! `seed_from_u64`, which is portable and stable across platforms. Stream 0
//! is used for measurement noise; other streams are free for callers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Default noise level.
pub const DEFAULT_DELTA: f64 = 0.01;

/// Clean and noisy data with the metadata needed to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyData {
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub delta: f64,
    pub seed: u64,
}

impl NoisyData {
    /// `|Phi^delta - Phi|_2`.
    pub fn noise_l2(&self) -> f64 {
        self.clean.iter().zip(&self.noisy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    /// `|Phi^delta - Phi|_2 / |Phi|_2`.
    pub fn noise_relative_l2(&self) -> f64 {
        let n = self.clean.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n == 0.0 {
            0.0
        } else {
            self.noise_l2() / n
        }
    }

    /// `max_i |Phi^delta_i - Phi_i| / |Phi_i|` over nonzero entries.
    pub fn max_relative_deviation(&self) -> f64 {
        self.clean
            .iter()
            .zip(&self.noisy)
            .filter(|(a, _)| **a != 0.0)
            .map(|(a, b)| ((b - a) / a).abs())
            .fold(0.0, f64::max)
    }
}

/// Generator used for all seeded draws.
pub fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Uniform draws `r_i` in `[0, 1)`.
pub fn uniform_draws(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed, 0);
    (0..n).map(|_| r.random::<f64>()).collect()
}

/// Applies the noise model with explicit draws `r_i ∈ [0, 1]`.
pub fn add_noise_with_draws(phi: &[f64], delta: f64, draws: &[f64], seed: u64) -> NoisyData {
    assert!(delta >= 0.0, "noise level must be nonnegative");
    assert_eq!(phi.len(), draws.len(), "one draw per entry");
    let noisy = if delta == 0.0 {
        phi.to_vec()
    } else {
        phi.iter().zip(draws).map(|(p, r)| p * (1.0 + delta * (2.0 * r - 1.0))).collect()
    };
    NoisyData { clean: phi.to_vec(), noisy, delta, seed }
}

pub fn add_noise(phi: &[f64], delta: f64, seed: u64) -> NoisyData {
    add_noise_with_draws(phi, delta, &uniform_draws(phi.len(), seed), seed)
}
