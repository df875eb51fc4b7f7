use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, Result};
use crate::tensor_core::{sigmoid, softplus, softplus_inv};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SensKind {
    S4d,
    S6,
}

/// Scalar-input SSM with `N` state components:
/// `h_{t,n} = e^{-λ_n Δ(x_t)} h_{t-1,n} + Δ(x_t) B_n(x_t) x_t`,
/// `Δ(x) = softplus(w_Δ x + b_Δ)`, `B_n(x) = w_B[n] x + b_B[n]`.
/// S4D is the case `w_Δ = 0`, `w_B = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarSsm {
    pub kind: SensKind,
    pub lambda: Vec<f64>,
    pub w_b: Vec<f64>,
    pub b_b: Vec<f64>,
    pub w_delta: f64,
    pub b_delta: f64,
}

impl ScalarSsm {
    /// S4D with Δ = 1.
    pub fn s4d(lambda: Vec<f64>, b: Vec<f64>) -> Self {
        let n = lambda.len();
        ScalarSsm {
            kind: SensKind::S4d,
            lambda,
            w_b: vec![0.0; n],
            b_b: b,
            w_delta: 0.0,
            b_delta: softplus_inv(1.0),
        }
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 || self.w_b.len() != n || self.b_b.len() != n {
            bail_invalid!("rates and B coefficients must have the same nonzero length");
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0)) {
            bail_invalid!("rates must be nonnegative");
        }
        if self.kind == SensKind::S4d && (self.w_delta != 0.0 || self.w_b.iter().any(|&w| w != 0.0))
        {
            bail_invalid!("s4d has input-independent Δ and B");
        }
        Ok(())
    }

    pub fn delta(&self, x: f64) -> f64 {
        softplus(self.w_delta * x + self.b_delta)
    }

    fn delta_prime(&self, x: f64) -> f64 {
        self.w_delta * sigmoid(self.w_delta * x + self.b_delta)
    }

    fn b(&self, n: usize, x: f64) -> f64 {
        self.w_b[n] * x + self.b_b[n]
    }

    /// States `[T][N]`.
    pub fn states(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut h = vec![0.0; n];
        let mut out = Vec::with_capacity(x.len());
        for &xt in x {
            let dl = self.delta(xt);
            for k in 0..n {
                h[k] = (-self.lambda[k] * dl).exp() * h[k] + dl * self.b(k, xt) * xt;
            }
            out.push(h.clone());
        }
        out
    }

    /// `λ_n Σ_{r=from}^{to} Δ(x_r)` with 1-based inclusive bounds.
    pub fn exponent_sum(&self, x: &[f64], n: usize, from: usize, to: usize) -> f64 {
        if from > to {
            return 0.0;
        }
        self.lambda[n] * x[from - 1..to].iter().map(|&v| self.delta(v)).sum::<f64>()
    }

    /// `∂/∂x (B_n(x) Δ(x) x)` at `x`.
    pub fn input_term_derivative(&self, n: usize, x: f64) -> f64 {
        let (dl, dp) = (self.delta(x), self.delta_prime(x));
        self.w_b[n] * dl * x + self.b(n, x) * dp * x + self.b(n, x) * dl
    }
}

fn check_indices(model: &ScalarSsm, x: &[f64], t: usize, j: usize, n: usize) -> Result<()> {
    model.validate()?;
    if j == 0 || j >= t || t > x.len() {
        bail_invalid!("need 1 <= j < t <= T, got j={} t={} T={}", j, t, x.len());
    }
    if n >= model.n() {
        bail_invalid!("component {} out of range", n);
    }
    Ok(())
}

/// Closed-form `∂h_{t,n}/∂x_j` (1-based `t`, `j`):
/// `e^{-λ_n Σ_{r=j+1}^t Δ(x_r)} · (∂_x(B_nΔx)(x_j) - λ_n Δ'(x_j) e^{-λ_nΔ(x_j)} h_{j-1,n})`.
pub fn sensitivity_analytic(
    model: &ScalarSsm,
    x: &[f64],
    t: usize,
    j: usize,
    n: usize,
) -> Result<f64> {
    check_indices(model, x, t, j, n)?;
    Ok(sensitivity_raw(model, x, t, j, n))
}

fn sensitivity_raw(model: &ScalarSsm, x: &[f64], t: usize, j: usize, n: usize) -> f64 {
    let decay = (-model.exponent_sum(x, n, j + 1, t)).exp();
    let h_prev = if j >= 2 {
        model.states(&x[..j - 1])[j - 2][n]
    } else {
        0.0
    };
    let xj = x[j - 1];
    let lam = model.lambda[n];
    let dlam = -lam * model.delta_prime(xj) * (-lam * model.delta(xj)).exp();
    decay * (model.input_term_derivative(n, xj) + dlam * h_prev)
}

/// Central difference of `f(x)[t-1][n]` with respect to `x_j`.
pub fn sensitivity_fd<F>(f: F, x: &[f64], t: usize, j: usize, n: usize, step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<Vec<f64>>,
{
    if !(step > 0.0) {
        bail_invalid!("step must be positive");
    }
    if j == 0 || j > x.len() || t == 0 || t > x.len() {
        bail_invalid!("indices out of range");
    }
    let mut xp = x.to_vec();
    xp[j - 1] += step;
    let mut xm = x.to_vec();
    xm[j - 1] -= step;
    Ok((f(&xp)[t - 1][n] - f(&xm)[t - 1][n]) / (2.0 * step))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub t: usize,
    pub j: usize,
    pub n: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_error: f64,
    pub decay_exponent: f64,
    pub lemma3_stat: f64,
}

pub fn sensitivity_report(
    model: &ScalarSsm,
    x: &[f64],
    t: usize,
    j: usize,
    n: usize,
    step: f64,
) -> Result<SensitivityReport> {
    let analytic = sensitivity_analytic(model, x, t, j, n)?;
    let fd = sensitivity_fd(|v| model.states(v), x, t, j, n, step)?;
    Ok(SensitivityReport {
        t,
        j,
        n,
        analytic,
        fd,
        rel_error: (analytic - fd).abs() / analytic.abs().max(1e-12),
        decay_exponent: model.exponent_sum(x, n, j + 1, t),
        lemma3_stat: model.exponent_sum(x, n, 1, t),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Check {
    pub n: usize,
    pub j: usize,
    /// `λ_n Σ_{r=1}^T Δ(x_r)`
    pub stat: f64,
    pub c: f64,
    pub holds: bool,
    /// `e^{-c} |∂_x(B_nΔx)(x_j)|`, only when the condition holds.
    pub lower_bound: Option<f64>,
    /// `|∂h_{T,n}/∂x_j|`
    pub sensitivity: f64,
    /// Whether the sensitivity clears the bound (1e-9 slack); `None` when the
    /// condition fails.
    pub bound_met: Option<bool>,
}

/// Evaluates the frozen-time condition at horizon `T = x.len()` and, when it
/// holds, compares the final-state sensitivity with the lower bound.
pub fn check_lemma3_condition(
    model: &ScalarSsm,
    x: &[f64],
    c: f64,
    n: usize,
    j: usize,
) -> Result<Lemma3Check> {
    model.validate()?;
    let tt = x.len();
    if j == 0 || j > tt || n >= model.n() {
        bail_invalid!("indices out of range");
    }
    let stat = model.exponent_sum(x, n, 1, tt);
    let holds = stat <= c;
    let sensitivity = sensitivity_raw(model, x, tt, j, n).abs();
    let lower_bound = holds.then(|| (-c).exp() * model.input_term_derivative(n, x[j - 1]).abs());
    let bound_met = lower_bound.map(|b| sensitivity >= b - 1e-9);
    Ok(Lemma3Check {
        n,
        j,
        stat,
        c,
        holds,
        lower_bound,
        sensitivity,
        bound_met,
    })
}
