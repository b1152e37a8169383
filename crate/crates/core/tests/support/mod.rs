#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::model::RobotModel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform configuration strictly inside the limits.
pub fn random_q(model: &RobotModel, rng: &mut impl Rng) -> Vec<f64> {
    (0..model.dof())
        .map(|i| {
            let j = model.dof_joint(i);
            let pad = 1e-3 * (j.upper - j.lower);
            rng.random_range(j.lower + pad..j.upper - pad)
        })
        .collect()
}

/// One-sample Kolmogorov–Smirnov statistic against U(0, 1).
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            (x - i as f64 / n).max((i + 1) as f64 / n - x)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at significance 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}
