use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, Result};
use crate::tensor_core::{softplus, softplus_inv};

pub const DEFAULT_QUAD_STEP: f64 = 1e-4;

/// One Mamba basis function `g(s) = B·exp(-λ ∫_s^{t_end} softplus(w r + b) dr)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub lambda: f64,
    pub b_coeff: f64,
    pub w_delta: f64,
    pub b_delta: f64,
    pub t_end: f64,
}

impl BasisSpec {
    /// Constant Δ = 1, i.e. the S4D exponential `B e^{-λ(t_end - s)}`.
    pub fn s4d(lambda: f64, b_coeff: f64) -> Self {
        BasisSpec {
            lambda,
            b_coeff,
            w_delta: 0.0,
            b_delta: softplus_inv(1.0),
            t_end: 1.0,
        }
    }

    /// Approximates `b_coeff·H(s - c)` for large negative `w_delta`.
    pub fn heaviside(c: f64, b_coeff: f64, w_delta: f64) -> Self {
        BasisSpec {
            lambda: 1.0,
            b_coeff,
            w_delta,
            b_delta: -w_delta * c,
            t_end: 1.0,
        }
    }

    fn delta(&self, r: f64) -> f64 {
        softplus(self.w_delta * r + self.b_delta)
    }
}

/// Evaluates `g(s)` with the composite trapezoid rule at (at most) `step`.
pub fn eval_mamba_basis(spec: &BasisSpec, s: f64, step: f64) -> Result<f64> {
    if !(0.0..=spec.t_end).contains(&s) {
        bail_invalid!("s = {} outside [0, {}]", s, spec.t_end);
    }
    if !(step > 0.0) {
        bail_invalid!("quadrature step must be positive");
    }
    let len = spec.t_end - s;
    let m = (len / step - 1e-9).ceil().max(1.0) as usize;
    let h = len / m as f64;
    let mut acc = 0.5 * (spec.delta(s) + spec.delta(spec.t_end));
    for i in 1..m {
        acc += spec.delta(s + i as f64 * h);
    }
    Ok(spec.b_coeff * (-spec.lambda * acc * h).exp())
}

/// `g` on the uniform grid `s_i = i·t_end/m`, `i = 0..=m`, via a cumulative
/// trapezoid sum from the right end.
pub fn eval_basis_grid(spec: &BasisSpec, m: usize) -> Vec<f64> {
    let h = spec.t_end / m as f64;
    let f: Vec<f64> = (0..=m).map(|i| spec.delta(i as f64 * h)).collect();
    let mut out = vec![0.0; m + 1];
    let mut integral = 0.0;
    out[m] = spec.b_coeff;
    for i in (0..m).rev() {
        integral += 0.5 * h * (f[i] + f[i + 1]);
        out[i] = spec.b_coeff * (-spec.lambda * integral).exp();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WaveletIndex {
    pub j: u32,
    pub k: u64,
}

impl WaveletIndex {
    pub fn new(j: u32, k: u64) -> Result<Self> {
        if k >= 1u64 << j {
            bail_invalid!("translation {} out of range for scale {}", k, j);
        }
        Ok(WaveletIndex { j, k })
    }

    /// Left end, midpoint and right end of the support.
    pub fn breakpoints(&self) -> [f64; 3] {
        let w = (-(self.j as f64)).exp2();
        let a = self.k as f64 * w;
        [a, a + 0.5 * w, a + w]
    }

    pub fn amplitude(&self) -> f64 {
        (self.j as f64 / 2.0).exp2()
    }
}

/// Reference Haar wavelet `ψ_{j,k}(s) = 2^{j/2} ψ(2^j s - k)` on `[0, 1]`.
pub fn haar(idx: WaveletIndex, s: f64) -> f64 {
    let [a, m, b] = idx.breakpoints();
    if s >= a && s < m {
        idx.amplitude()
    } else if s >= m && s < b {
        -idx.amplitude()
    } else {
        0.0
    }
}

/// Three Heaviside-like basis functions whose combination `g₁ + g₃ - 2g₂`
/// approximates `ψ_{j,k}`.
pub fn build_wavelet_triplet(idx: WaveletIndex, w_delta: f64) -> Result<[BasisSpec; 3]> {
    if w_delta > -1e2 {
        bail_invalid!("w_delta must be <= -1e2, got {}", w_delta);
    }
    let amp = idx.amplitude();
    let [a, m, b] = idx.breakpoints();
    Ok([
        BasisSpec::heaviside(a, amp, w_delta),
        BasisSpec::heaviside(m, amp, w_delta),
        BasisSpec::heaviside(b, amp, w_delta),
    ])
}

/// Grid values of the triplet combination `g₁ + g₃ - 2g₂`.
pub fn triplet_grid(triplet: &[BasisSpec; 3], m: usize) -> Vec<f64> {
    let g: Vec<Vec<f64>> = triplet.iter().map(|s| eval_basis_grid(s, m)).collect();
    (0..=m).map(|i| g[0][i] + g[2][i] - 2.0 * g[1][i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s4d_limit() {
        let spec = BasisSpec::s4d(1.0, 1.0);
        for s in [0.0, 0.3, 1.0] {
            let g = eval_mamba_basis(&spec, s, DEFAULT_QUAD_STEP).unwrap();
            assert!((g - (-(1.0 - s)).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_matches_pointwise() {
        let spec = BasisSpec {
            lambda: 0.7,
            b_coeff: 1.3,
            w_delta: -3.0,
            b_delta: 0.4,
            t_end: 1.0,
        };
        let g = eval_basis_grid(&spec, 1000);
        for i in [0, 250, 999, 1000] {
            let p = eval_mamba_basis(&spec, i as f64 / 1000.0, 1e-3).unwrap();
            assert!((g[i] - p).abs() < 1e-12, "{} {}", g[i], p);
        }
    }

    #[test]
    fn out_of_range() {
        assert!(eval_mamba_basis(&BasisSpec::s4d(1.0, 1.0), 1.5, 1e-3).is_err());
        assert!(WaveletIndex::new(1, 2).is_err());
    }
}
