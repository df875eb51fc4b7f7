use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, Error, Result};
use crate::tensor_core::Tensor;

pub const JL_DELTA: f64 = 0.1;
pub const DEFAULT_MAX_RESAMPLES: usize = 1000;

/// Random ±1/√p matrix with nearly orthogonal unit columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JlProjection {
    pub p: usize,
    /// `[p, d]`; column `i` is the embedding of `e_i`.
    pub matrix: Tensor,
    /// Largest off-diagonal |⟨M e_i, M e_j⟩| actually achieved.
    pub epsilon: f64,
    pub seed: u64,
}

/// `ceil((4/ε²) ln(d/δ))` with δ = 0.1.
pub fn jl_dim(d: usize, epsilon: f64) -> usize {
    ((4.0 / (epsilon * epsilon)) * (d as f64 / JL_DELTA).ln())
        .ceil()
        .max(1.0) as usize
}

impl JlProjection {
    pub fn d(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        let d = self.d();
        (0..self.p).map(|r| self.matrix.data()[r * d + i]).collect()
    }
}

fn max_offdiag(m: &[f64], p: usize, d: usize) -> f64 {
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..p).map(|r| m[r * d + i]).collect())
        .collect();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in i + 1..d {
            let ip: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            worst = worst.max(ip.abs());
        }
    }
    worst
}

fn sample(
    d: usize,
    epsilon: f64,
    seed: u64,
    max_resamples: usize,
    ones_column: bool,
) -> Result<JlProjection> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        bail_invalid!("epsilon must lie in (0, 0.5), got {}", epsilon);
    }
    if d == 0 {
        bail_invalid!("need at least one column");
    }
    let total = d + ones_column as usize;
    let p = jl_dim(total, epsilon);
    let s = 1.0 / (p as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    for _ in 0..max_resamples.max(1) {
        let mut m = vec![0.0; p * total];
        for r in 0..p {
            for c in 0..d {
                m[r * total + c] = if rng.gen::<bool>() { s } else { -s };
            }
            if ones_column {
                m[r * total + d] = s;
            }
        }
        let eps = max_offdiag(&m, p, total);
        if eps <= epsilon {
            return Ok(JlProjection {
                p,
                matrix: Tensor::new(vec![p, total], m)?,
                epsilon: eps,
                seed,
            });
        }
        best = best.min(eps);
    }
    Err(Error::Numeric(format!(
        "no valid projection after {max_resamples} samples (best epsilon {best})"
    )))
}

/// Samples until every pair of distinct columns has |inner product| ≤ ε.
pub fn jl_projection(
    d: usize,
    epsilon: f64,
    seed: u64,
    max_resamples: usize,
) -> Result<JlProjection> {
    sample(d, epsilon, seed, max_resamples, false)
}

/// Like [`jl_projection`] with an extra last column equal to `1_p/√p`,
/// included in the pairwise check.
pub fn jl_projection_with_ones(
    d: usize,
    epsilon: f64,
    seed: u64,
    max_resamples: usize,
) -> Result<JlProjection> {
    sample(d, epsilon, seed, max_resamples, true)
}
