//! Selective-scan recurrences for the four mixer kinds.
//!
//! All kinds share the diagonal recurrence
//! `h_t[i,n] = a_t[i,n] * h_{t-1}[i,n] + u_t[i,n]`, `y_t[i] = Σ_n h_t[i,n] C_t[n]`
//! and differ only in how the decay `a` and the input term `u` are indexed:
//!
//! | kind     | decay exponent        | input term                 |
//! |----------|-----------------------|----------------------------|
//! | s4d      | λ[i,n]·Δ (Δ = 1)      | Δ·x̂[i]·B[n] (static B, C)  |
//! | mamba    | λ[i,n]·Δ_t[i]         | Δ_t[i]·x̂_t[i]·B_t[n]       |
//! | mamba2   | λ·Δ_t                 | Δ_t·x̂_t[i]·B_t[n]          |
//! | mamba_dt | λ[i,n]·Δ_t[n]         | x̂_t[i]·B_t[n]              |

use serde::{Deserialize, Serialize};

use super::discretize::zoh_gain;
use crate::error::{bail_invalid, bail_shape, Result};
use crate::tensor_core::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MixerKind {
    S4d,
    Mamba,
    Mamba2,
    MambaDt,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [
        MixerKind::S4d,
        MixerKind::Mamba,
        MixerKind::Mamba2,
        MixerKind::MambaDt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::S4d => "s4d",
            MixerKind::Mamba => "mamba",
            MixerKind::Mamba2 => "mamba2",
            MixerKind::MambaDt => "mamba_dt",
        }
    }

    /// Width of the per-step Δ vector.
    pub fn delta_width(self, d: usize, n: usize) -> usize {
        match self {
            MixerKind::S4d | MixerKind::Mamba => d,
            MixerKind::Mamba2 => 1,
            MixerKind::MambaDt => n,
        }
    }

    pub fn lambda_len(self, d: usize, n: usize) -> usize {
        match self {
            MixerKind::Mamba2 => 1,
            _ => d * n,
        }
    }
}

/// How the input coefficient B is discretized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDisc {
    #[default]
    Euler,
    Zoh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanAlgo {
    /// Dual form for scalar-decay mixers when it is cheaper, sequential otherwise.
    #[default]
    Auto,
    Sequential,
    Parallel,
    Dual,
}

/// Borrowed per-sequence scan operands, all row-major.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    pub kind: MixerKind,
    pub d: usize,
    pub n: usize,
    pub t: usize,
    /// `d*n` rates, or a single rate for mamba2.
    pub lambda: &'a [f64],
    /// `t*d`
    pub xhat: &'a [f64],
    /// `t*delta_width`; `None` means Δ ≡ 1.
    pub delta: Option<&'a [f64]>,
    /// `t*n`, or `n` when `static_bc`.
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub static_bc: bool,
    pub disc: InputDisc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput {
    /// `[t, d]`
    pub y: Tensor,
    /// `[d, n]`; not produced by the dual form.
    pub final_state: Option<Tensor>,
}

impl<'a> ScanInputs<'a> {
    /// Builds and validates operands from tensors: `xhat [T,d]`, `delta [T,w]`,
    /// `b`/`c` either `[T,N]` or static `[N]`.
    pub fn from_tensors(
        kind: MixerKind,
        lambda: &'a Tensor,
        xhat: &'a Tensor,
        delta: Option<&'a Tensor>,
        b: &'a Tensor,
        c: &'a Tensor,
    ) -> Result<Self> {
        if xhat.shape().len() != 2 {
            bail_shape!("xhat must be [T, d], got {:?}", xhat.shape());
        }
        let (t, d) = (xhat.shape()[0], xhat.shape()[1]);
        let static_bc = b.shape().len() == 1;
        let n = b.cols();
        let inp = ScanInputs {
            kind,
            d,
            n,
            t,
            lambda: lambda.data(),
            xhat: xhat.data(),
            delta: delta.map(|x| x.data()),
            b: b.data(),
            c: c.data(),
            static_bc,
            disc: InputDisc::Euler,
        };
        inp.validate()?;
        Ok(inp)
    }

    pub fn with_disc(mut self, disc: InputDisc) -> Self {
        self.disc = disc;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n, t) = (self.d, self.n, self.t);
        if self.lambda.len() != self.kind.lambda_len(d, n) {
            bail_shape!(
                "{} expects {} rates, got {}",
                self.kind.name(),
                self.kind.lambda_len(d, n),
                self.lambda.len()
            );
        }
        if self.xhat.len() != t * d {
            bail_shape!("xhat has {} entries, expected {}", self.xhat.len(), t * d);
        }
        let bc_len = if self.static_bc { n } else { t * n };
        if self.b.len() != bc_len || self.c.len() != bc_len {
            bail_shape!("B/C must have {} entries", bc_len);
        }
        if self.static_bc != (self.kind == MixerKind::S4d) {
            bail_invalid!("static B/C is used exactly by s4d");
        }
        if let Some(dl) = self.delta {
            let w = self.kind.delta_width(d, n);
            if dl.len() != t * w {
                bail_shape!("delta has {} entries, expected {}", dl.len(), t * w);
            }
            if dl.iter().any(|&x| !(x >= 0.0) || x.is_infinite()) {
                bail_invalid!("step sizes must be finite and nonnegative");
            }
        } else if self.kind != MixerKind::S4d {
            bail_invalid!("{} needs per-step deltas", self.kind.name());
        }
        if self.lambda.iter().any(|&x| !(x >= 0.0) || x.is_infinite()) {
            bail_invalid!("rates must be finite and nonnegative");
        }
        Ok(())
    }

    #[inline]
    fn delta_at(&self, t: usize, i: usize, k: usize) -> f64 {
        match self.delta {
            None => 1.0,
            Some(dl) => match self.kind {
                MixerKind::S4d | MixerKind::Mamba => dl[t * self.d + i],
                MixerKind::Mamba2 => dl[t],
                MixerKind::MambaDt => dl[t * self.n + k],
            },
        }
    }

    #[inline]
    fn lambda_at(&self, i: usize, k: usize) -> f64 {
        if self.kind == MixerKind::Mamba2 {
            self.lambda[0]
        } else {
            self.lambda[i * self.n + k]
        }
    }

    #[inline]
    fn b_at(&self, t: usize, k: usize) -> f64 {
        if self.static_bc {
            self.b[k]
        } else {
            self.b[t * self.n + k]
        }
    }

    #[inline]
    fn c_at(&self, t: usize, k: usize) -> f64 {
        if self.static_bc {
            self.c[k]
        } else {
            self.c[t * self.n + k]
        }
    }

    /// Returns (log decay, input coefficient) for one entry; the input term is
    /// `coef * x̂[t,i] * B[t,k]`.
    #[inline]
    pub(crate) fn step_terms(&self, t: usize, i: usize, k: usize) -> (f64, f64) {
        let dl = self.delta_at(t, i, k);
        let z = self.lambda_at(i, k) * dl;
        let coef = match (self.kind, self.disc) {
            (MixerKind::MambaDt, _) => 1.0,
            (_, InputDisc::Euler) => dl,
            (_, InputDisc::Zoh) => dl * zoh_gain(z),
        };
        (-z, coef)
    }

    /// All decay factors e^{-λΔ} in `[t][i][n]` order.
    pub fn decay_factors(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.t * self.d * self.n);
        for t in 0..self.t {
            for i in 0..self.d {
                for k in 0..self.n {
                    out.push(self.step_terms(t, i, k).0.exp());
                }
            }
        }
        out
    }
}

fn run_sequential(inp: &ScanInputs, mut states: Option<&mut Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let (d, n) = (inp.d, inp.n);
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; inp.t * d];
    for t in 0..inp.t {
        for i in 0..d {
            let x = inp.xhat[t * d + i];
            let mut acc = 0.0;
            for k in 0..n {
                let (ld, coef) = inp.step_terms(t, i, k);
                let a = ld.exp();
                debug_assert!((0.0..=1.0).contains(&a));
                let hk = &mut h[i * n + k];
                *hk = a * *hk + coef * x * inp.b_at(t, k);
                acc += *hk * inp.c_at(t, k);
            }
            y[t * d + i] = acc;
        }
        if let Some(s) = states.as_deref_mut() {
            s.extend_from_slice(&h);
        }
    }
    (y, h)
}

pub fn scan_sequential(inp: &ScanInputs) -> Result<ScanOutput> {
    inp.validate()?;
    let (y, h) = run_sequential(inp, None);
    Ok(ScanOutput {
        y: Tensor::new(vec![inp.t, inp.d], y)?,
        final_state: Some(Tensor::new(vec![inp.d, inp.n], h)?),
    })
}

/// Sequential scan that also returns every state `h_1..h_T` (`t*d*n`).
pub(crate) fn scan_with_states(inp: &ScanInputs) -> (Vec<f64>, Vec<f64>) {
    let mut states = Vec::with_capacity(inp.t * inp.d * inp.n);
    let (y, _) = run_sequential(inp, Some(&mut states));
    (y, states)
}

/// Prefix scan with the associative combine
/// `(a1, b1) ∘ (a2, b2) = (a1 a2, a2 b1 + b2)`, decays kept as logs.
/// Uses a Hillis–Steele sweep, so the combination tree depends only on T.
pub fn scan_parallel(inp: &ScanInputs) -> Result<ScanOutput> {
    inp.validate()?;
    let (d, n, tl) = (inp.d, inp.n, inp.t);
    let mut y = vec![0.0; tl * d];
    let mut last = vec![0.0; d * n];
    let mut logs = vec![0.0; tl];
    let mut us = vec![0.0; tl];
    let mut nlogs = vec![0.0; tl];
    let mut nus = vec![0.0; tl];
    for i in 0..d {
        for k in 0..n {
            for t in 0..tl {
                let (ld, coef) = inp.step_terms(t, i, k);
                logs[t] = ld;
                us[t] = coef * inp.xhat[t * d + i] * inp.b_at(t, k);
            }
            let mut off = 1;
            while off < tl {
                nlogs[..off].copy_from_slice(&logs[..off]);
                nus[..off].copy_from_slice(&us[..off]);
                for t in off..tl {
                    nlogs[t] = logs[t - off] + logs[t];
                    nus[t] = logs[t].exp() * us[t - off] + us[t];
                }
                std::mem::swap(&mut logs, &mut nlogs);
                std::mem::swap(&mut us, &mut nus);
                off *= 2;
            }
            for t in 0..tl {
                y[t * d + i] += us[t] * inp.c_at(t, k);
            }
            if tl > 0 {
                last[i * n + k] = us[tl - 1];
            }
        }
    }
    Ok(ScanOutput {
        y: Tensor::new(vec![tl, d], y)?,
        final_state: Some(Tensor::new(vec![d, n], last)?),
    })
}

/// Quadratic "attention-like" form for mixers whose decay is one scalar per
/// step (mamba2): `y_t = Σ_{s≤t} e^{Σ_{r=s+1}^t log a_r} coef_s ⟨B_s, C_t⟩ x̂_s`.
/// Costs O(T²(d+N)) instead of O(T d N).
pub fn scan_dual(inp: &ScanInputs) -> Result<ScanOutput> {
    inp.validate()?;
    if inp.kind != MixerKind::Mamba2 {
        bail_invalid!("the dual form needs a scalar decay per step");
    }
    let (d, n, tl) = (inp.d, inp.n, inp.t);
    let terms: Vec<(f64, f64)> = (0..tl).map(|t| inp.step_terms(t, 0, 0)).collect();
    let mut y = vec![0.0; tl * d];
    for t in 0..tl {
        let ct = &inp.c[t * n..(t + 1) * n];
        let yrow = &mut y[t * d..(t + 1) * d];
        let mut acc = 0.0f64;
        for s in (0..=t).rev() {
            let bs = &inp.b[s * n..(s + 1) * n];
            let w = acc.exp() * terms[s].1 * dot(bs, ct);
            if w != 0.0 {
                for (yv, &xv) in yrow.iter_mut().zip(&inp.xhat[s * d..(s + 1) * d]) {
                    *yv += w * xv;
                }
            }
            acc += terms[s].0;
        }
    }
    Ok(ScanOutput {
        y: Tensor::new(vec![tl, d], y)?,
        final_state: None,
    })
}

pub fn scan_with(algo: ScanAlgo, inp: &ScanInputs) -> Result<ScanOutput> {
    match algo {
        ScanAlgo::Sequential => scan_sequential(inp),
        ScanAlgo::Parallel => scan_parallel(inp),
        ScanAlgo::Dual => scan_dual(inp),
        ScanAlgo::Auto => {
            if inp.kind == MixerKind::Mamba2 && inp.t * (inp.d + inp.n) < 2 * inp.d * inp.n {
                scan_dual(inp)
            } else {
                scan_sequential(inp)
            }
        }
    }
}
