use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::constructions::{build_wavelet_triplet, triplet_grid, WaveletIndex};
use crate::error::{bail_invalid, Error, Result};

/// Piecewise-constant function on `[0, 1]`: `values[i]` on
/// `[breaks[i-1], breaks[i])` with `breaks[-1] = 0`, `breaks[m] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant {
    pub breaks: Vec<f64>,
    pub values: Vec<f64>,
}

impl PiecewiseConstant {
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let p = PiecewiseConstant { breaks, values };
        p.validate()?;
        Ok(p)
    }

    /// `H(s - c)`.
    pub fn heaviside(c: f64) -> Result<Self> {
        Self::new(vec![c], vec![0.0, 1.0])
    }

    pub fn constant(v: f64) -> Self {
        PiecewiseConstant {
            breaks: vec![],
            values: vec![v],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.breaks.len() + 1 {
            bail_invalid!("need one more value than breakpoint");
        }
        let mut prev = 0.0;
        for &b in &self.breaks {
            if !(b > prev && b < 1.0) {
                bail_invalid!("breakpoints must be increasing inside (0, 1)");
            }
            prev = b;
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            bail_invalid!("values must be finite");
        }
        Ok(())
    }

    /// Number of discontinuities.
    pub fn jumps(&self) -> usize {
        self.values.windows(2).filter(|w| w[0] != w[1]).count()
    }

    fn jump_points(&self) -> Vec<f64> {
        self.breaks
            .iter()
            .zip(self.values.windows(2))
            .filter(|(_, w)| w[0] != w[1])
            .map(|(&b, _)| b)
            .collect()
    }

    fn pieces(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (0..self.values.len()).map(move |i| {
            let a = if i == 0 { 0.0 } else { self.breaks[i - 1] };
            let b = if i == self.breaks.len() {
                1.0
            } else {
                self.breaks[i]
            };
            (a, b, self.values[i])
        })
    }

    pub fn eval(&self, s: f64) -> f64 {
        let i = self.breaks.iter().take_while(|&&b| s >= b).count();
        self.values[i]
    }

    /// `∫_a^b ρ`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.pieces()
            .map(|(lo, hi, v)| v * (hi.min(b) - lo.max(a)).max(0.0))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.integral(0.0, 1.0)
    }

    /// `‖ρ - mean‖²`
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pieces()
            .map(|(a, b, v)| (v - m).powi(2) * (b - a))
            .sum()
    }

    pub fn haar_coefficient(&self, idx: WaveletIndex) -> f64 {
        let [a, m, b] = idx.breakpoints();
        idx.amplitude() * (self.integral(a, m) - self.integral(m, b))
    }

    /// Cosine and sine coefficients for frequency `k >= 1` in the orthonormal
    /// basis `√2 cos 2πks`, `√2 sin 2πks`.
    pub fn fourier_coefficients(&self, k: u64) -> (f64, f64) {
        let w = 2.0 * PI * k as f64;
        let (mut c, mut s) = (0.0, 0.0);
        for (a, b, v) in self.pieces() {
            c += v * ((w * b).sin() - (w * a).sin()) / w;
            s += v * ((w * a).cos() - (w * b).cos()) / w;
        }
        (2f64.sqrt() * c, 2f64.sqrt() * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ApproxMethod {
    MambaWavelet,
    Fourier,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    /// Quadrature grid intervals on `[0, 1]`.
    pub grid: usize,
    pub w_delta: f64,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        ApproxConfig {
            grid: 1 << 19,
            w_delta: -1e9,
        }
    }
}

/// Wavelets chosen for `n` terms: per scale, the `m` largest ideal
/// coefficients (ties: support midpoint nearest a jump, then lowest `k`).
pub fn select_wavelets(target: &PiecewiseConstant, n: usize) -> Result<Vec<WaveletIndex>> {
    let jumps = target.jump_points();
    let per_scale = jumps.len().max(1);
    let mut out = Vec::with_capacity(n);
    let mut j = 0u32;
    while out.len() < n {
        if j > 52 {
            bail_invalid!("wavelet scale exceeds double precision");
        }
        let size = 1u64 << j;
        let mut cand: Vec<u64> = vec![];
        let anchors = if jumps.is_empty() {
            vec![0.5]
        } else {
            jumps.clone()
        };
        for &c in &anchors {
            let k = ((c * size as f64).floor() as u64).min(size - 1);
            cand.push(k);
            if k > 0 {
                cand.push(k - 1);
            }
        }
        cand.sort_unstable();
        cand.dedup();
        let mut scored: Vec<(f64, f64, u64)> = cand
            .into_iter()
            .map(|k| {
                let idx = WaveletIndex { j, k };
                let mid = idx.breakpoints()[1];
                let dist = anchors
                    .iter()
                    .map(|&c| (c - mid).abs())
                    .fold(f64::INFINITY, f64::min);
                (target.haar_coefficient(idx).abs(), dist, k)
            })
            .collect();
        scored.sort_by(|x, y| {
            y.0.total_cmp(&x.0)
                .then(x.1.total_cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        for &(_, _, k) in scored.iter().take(per_scale) {
            if out.len() < n {
                out.push(WaveletIndex { j, k });
            }
        }
        j += 1;
    }
    Ok(out)
}

fn trapezoid_dot(a: &[f64], b: &[f64], h: f64) -> f64 {
    let n = a.len();
    let inner: f64 = a[1..n - 1]
        .iter()
        .zip(&b[1..n - 1])
        .map(|(x, y)| x * y)
        .sum();
    h * (inner + 0.5 * (a[0] * b[0] + a[n - 1] * b[n - 1]))
}

/// Solves a symmetric positive definite system by Cholesky factorization.
fn cholesky_solve(a: &[Vec<f64>], mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..=i {
            let s: f64 = (0..k).map(|p| l[i][p] * l[k][p]).sum();
            if i == k {
                let v = a[i][i] - s;
                if !(v > 0.0) {
                    return Err(Error::Numeric(format!(
                        "Gram matrix not positive definite at row {i}"
                    )));
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][k] = (a[i][k] - s) / l[k][k];
            }
        }
    }
    for i in 0..n {
        let s: f64 = (0..i).map(|p| l[i][p] * b[p]).sum();
        b[i] = (b[i] - s) / l[i][i];
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|p| l[p][i] * b[p]).sum();
        b[i] = (b[i] - s) / l[i][i];
    }
    Ok(b)
}

/// Ordinary least squares fit `y ≈ a + slope·x`; returns `(slope, rms residual)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - icpt - slope * a).powi(2))
        .sum();
    Some((slope, (rss / n as f64).sqrt()))
}

fn check_resolution(cfg: &ApproxConfig, idx: WaveletIndex) -> Result<()> {
    let half = (-(idx.j as f64) - 1.0).exp2();
    let h = 1.0 / cfg.grid as f64;
    let width = (2.0 / cfg.w_delta.abs()).sqrt();
    if half < 4.0 * h || half < 4.0 * width {
        bail_invalid!(
            "wavelet scale {} below resolution (grid step {:.2e}, smoothing width {:.2e})",
            idx.j,
            h,
            width
        );
    }
    Ok(())
}

/// Squared L² residuals of the least-squares fit of `target` by the constant
/// plus the first `N` realized wavelets, for each `N` in `n_list`.
pub fn wavelet_errors(
    target: &PiecewiseConstant,
    n_list: &[usize],
    cfg: &ApproxConfig,
) -> Result<(Vec<f64>, Vec<WaveletIndex>)> {
    target.validate()?;
    if cfg.grid < 16 {
        bail_invalid!("quadrature grid too coarse");
    }
    let n_max = n_list.iter().copied().max().unwrap_or(0);
    let chosen = select_wavelets(target, n_max)?;
    for &idx in &chosen {
        check_resolution(cfg, idx)?;
    }
    let m = cfg.grid;
    let h = 1.0 / m as f64;
    let rho: Vec<f64> = (0..=m)
        .map(|i| {
            let s = i as f64 * h;
            match target.breaks.iter().position(|&b| (b - s).abs() < 1e-3 * h) {
                Some(p) => 0.5 * (target.values[p] + target.values[p + 1]),
                None => target.eval(s),
            }
        })
        .collect();
    let mut basis = vec![vec![1.0; m + 1]];
    for &idx in &chosen {
        basis.push(triplet_grid(&build_wavelet_triplet(idx, cfg.w_delta)?, m));
    }
    let k = basis.len();
    let mut gram = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..=a {
            let v = trapezoid_dot(&basis[a], &basis[b], h);
            gram[a][b] = v;
            gram[b][a] = v;
        }
    }
    let rhs: Vec<f64> = basis.iter().map(|g| trapezoid_dot(g, &rho, h)).collect();
    let mut errors = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let sub: Vec<Vec<f64>> = gram[..=n].iter().map(|r| r[..=n].to_vec()).collect();
        let coef = cholesky_solve(&sub, rhs[..=n].to_vec())?;
        let mut resid = rho.clone();
        for (c, g) in coef.iter().zip(&basis) {
            for (r, v) in resid.iter_mut().zip(g) {
                *r -= c * v;
            }
        }
        errors.push(trapezoid_dot(&resid, &resid, h).max(0.0));
    }
    Ok((errors, chosen))
}

/// Squared L² error of the best `N`-term trigonometric approximation (the
/// mean is always kept), from exact coefficients via Parseval.
pub fn fourier_errors(target: &PiecewiseConstant, n_list: &[usize]) -> Result<Vec<f64>> {
    target.validate()?;
    let n_max = n_list.iter().copied().max().unwrap_or(0);
    let k_max = (64 * n_max).max(1024) as u64;
    let mut sq: Vec<f64> = (1..=k_max)
        .flat_map(|k| {
            let (c, s) = target.fourier_coefficients(k);
            [c * c, s * s]
        })
        .collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = vec![0.0; n_max + 1];
    for i in 0..n_max {
        prefix[i + 1] = prefix[i] + sq[i];
    }
    let var = target.variance();
    Ok(n_list.iter().map(|&n| (var - prefix[n]).max(0.0)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxRateReport {
    pub target: PiecewiseConstant,
    pub jumps: usize,
    pub method: ApproxMethod,
    pub n_list: Vec<usize>,
    /// Squared L² errors, aligned with `n_list`.
    pub errors: Vec<f64>,
    /// Squared-error slope: vs `N` on log₂ for wavelets, vs `ln N` on `ln`
    /// for Fourier.
    pub slope: Option<f64>,
    pub slope_residual: Option<f64>,
    /// Same fit for the (unsquared) L² error.
    pub l2_slope: Option<f64>,
    pub wavelets: Vec<WaveletIndex>,
    pub config: ApproxConfig,
}

pub fn approx_rate(
    target: &PiecewiseConstant,
    n_list: &[usize],
    method: ApproxMethod,
    cfg: &ApproxConfig,
) -> Result<ApproxRateReport> {
    let (errors, wavelets) = match method {
        ApproxMethod::MambaWavelet => wavelet_errors(target, n_list, cfg)?,
        ApproxMethod::Fourier => (fourier_errors(target, n_list)?, vec![]),
    };
    let pts: Vec<(f64, f64)> = n_list
        .iter()
        .zip(&errors)
        .filter(|(&n, &e)| e > 0.0 && (method == ApproxMethod::MambaWavelet || n > 0))
        .map(|(&n, &e)| match method {
            ApproxMethod::MambaWavelet => (n as f64, e.log2()),
            ApproxMethod::Fourier => ((n as f64).ln(), e.ln()),
        })
        .collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let fit = ols_slope(&xs, &ys);
    let half: Vec<f64> = ys.iter().map(|y| 0.5 * y).collect();
    Ok(ApproxRateReport {
        target: target.clone(),
        jumps: target.jumps(),
        method,
        n_list: n_list.to_vec(),
        errors,
        slope: fit.map(|f| f.0),
        slope_residual: fit.map(|f| f.1),
        l2_slope: ols_slope(&xs, &half).map(|f| f.0),
        wavelets,
        config: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heaviside_fourier_coefficients() {
        let h = PiecewiseConstant::heaviside(0.5).unwrap();
        for k in 1..6u64 {
            let (c, s) = h.fourier_coefficients(k);
            assert!(c.abs() < 1e-12);
            let want = if k % 2 == 1 {
                -(2f64.sqrt()) / (PI * k as f64)
            } else {
                0.0
            };
            assert!((s - want).abs() < 1e-12, "{k} {s} {want}");
        }
        assert!((h.variance() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn selection_at_dyadic_jump() {
        let h = PiecewiseConstant::heaviside(0.5).unwrap();
        let w = select_wavelets(&h, 3).unwrap();
        assert_eq!(w[0], WaveletIndex { j: 0, k: 0 });
        assert_eq!(w[1].j, 1);
        assert_eq!(w[2].j, 2);
        assert!((h.haar_coefficient(w[0]) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn cholesky_small() {
        let a = vec![vec![4.0, 2.0], vec![2.0, 3.0]];
        let x = cholesky_solve(&a, vec![2.0, 1.0]).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
    }
}
