use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::jl::{jl_projection, jl_projection_with_ones, JlProjection, DEFAULT_MAX_RESAMPLES};
use crate::error::{bail_invalid, Result};
use crate::mixers::{
    scan_sequential, Act, ConvKernel, DeltaProj, Gate, InputDisc, Linear, MambaBlock, MixerKind,
    Provenance, ScanInputs, SsmParams,
};
use crate::tasks::MqarTokens;
use crate::tensor_core::{softplus_inv, Tensor};

/// Default finite stand-in for w_Δ → ±∞.
pub const W_DELTA: f64 = 1e4;
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum EmbedMode {
    #[default]
    Onehot,
    Jl,
}

fn provenance(builder: &str, args: serde_json::Value, seed: Option<u64>) -> Option<Provenance> {
    Some(Provenance {
        builder: builder.to_string(),
        args,
        seed,
    })
}

/// `[rows, cols]` matrix with ones at `(r, c0 + r)`.
fn shifted_eye(rows: usize, cols: usize, c0: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        t.set(r, c0 + r, 1.0);
    }
    t
}

fn zero_bias(out: usize) -> Option<Tensor> {
    Some(Tensor::zeros(&[out]))
}

fn check_kappa(kappa: usize, vocab: usize) -> Result<()> {
    if kappa == 0 || vocab == 0 {
        bail_invalid!("kappa and vocab must be positive");
    }
    Ok(())
}

fn jl_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

// Keep n-th

pub const KEEP_DELTA_WRITE: f64 = 1e-3;
pub const KEEP_B_SCALE: f64 = 1e3;

/// Simplified Mamba with PE that copies `x_n` to every later position.
///
/// The Δ projection reads the position channel with weight `-w·T`, so
/// `Δ_p = softplus(-w(p-n) + softplus⁻¹(δ))`: about `w` before `n` (erase),
/// `δ` at `n` (write) and exactly 0 after `n` (retain). `B_p = β(p-n+1)`
/// vanishes at `p = n-1` and equals `β = 1/δ` at the write step.
pub fn build_keep_nth(
    n: usize,
    t_len: usize,
    vocab: usize,
    d: usize,
    n_state: usize,
    seed: u64,
) -> Result<MambaBlock> {
    if n == 0 || n > t_len {
        bail_invalid!("need 1 <= n <= T, got n={} T={}", n, t_len);
    }
    if vocab == 0 || n_state == 0 || d < 2 {
        bail_invalid!("need vocab >= 1, N >= 1, d >= 2");
    }
    let e = d - 1;
    let mut emb = Tensor::zeros(&[vocab + 1, e]);
    if e >= vocab {
        for v in 1..=vocab {
            emb.set(v, v - 1, 1.0);
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in 1..=vocab {
            let g: Vec<f64> = (0..e).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (c, x) in g.into_iter().enumerate() {
                emb.set(v, c, x / norm);
            }
        }
    }
    let tf = t_len as f64;
    let w = -W_DELTA;
    let mut dw = Tensor::zeros(&[d, d]);
    for i in 0..d {
        dw.set(i, d - 1, w * tf);
    }
    let db = Tensor::full(&[d], -w * n as f64 + softplus_inv(KEEP_DELTA_WRITE));
    let mut bw = Tensor::zeros(&[n_state, d]);
    bw.set(0, d - 1, KEEP_B_SCALE * tf);
    let mut bb = Tensor::zeros(&[n_state]);
    bb.data_mut()[0] = -KEEP_B_SCALE * (n as f64 - 1.0);
    let mut cb = Tensor::zeros(&[n_state]);
    cb.data_mut()[0] = 1.0;
    let mut wo = Tensor::zeros(&[vocab + 1, d]);
    for v in 1..=vocab {
        for c in 0..e {
            wo.set(v, c, emb.at(v, c));
        }
    }
    let block = MambaBlock {
        kind: MixerKind::Mamba,
        vocab: vocab + 1,
        d,
        n: n_state,
        classes: vocab + 1,
        pe: true,
        simplified: true,
        embedding: emb,
        conv: None,
        conv_b: None,
        conv_c: None,
        in_proj: None,
        ssm: SsmParams {
            lambda: Tensor::full(&[d, n_state], 1.0),
            delta_proj: Some(DeltaProj::full(Linear::new(dw, Some(db))?)),
            b_proj: Some(Linear::new(bw, Some(bb))?),
            c_proj: Some(Linear::new(Tensor::zeros(&[n_state, d]), Some(cb))?),
            static_b: None,
            static_c: None,
            disc: InputDisc::Euler,
        },
        gate: None,
        out_proj: Linear::new(wo, None)?,
        provenance: provenance(
            "keep_nth",
            json!({"n": n, "T": t_len, "vocab": vocab, "d": d, "N": n_state}),
            Some(seed),
        ),
    };
    block.validate()?;
    Ok(block)
}

// MQAR, Mamba (shared conv, no gate)

pub fn build_mqar_mamba(
    kappa: usize,
    vocab: usize,
    mode: EmbedMode,
    epsilon: Option<f64>,
    seed: u64,
) -> Result<MambaBlock> {
    check_kappa(kappa, vocab)?;
    let tok = MqarTokens { kappa, vocab };
    let eps = epsilon.unwrap_or(DEFAULT_EPSILON);
    let (emb, conv, c_scale, wo, bo, d) = match mode {
        EmbedMode::Onehot => {
            let d = kappa + vocab;
            let mut emb = Tensor::zeros(&[tok.size(), d]);
            for i in 1..=kappa {
                emb.set(tok.key(i), i - 1, 2.0);
            }
            let mut wo = Tensor::zeros(&[tok.size(), d]);
            for j in 1..=vocab {
                emb.set(tok.value(j), kappa + j - 1, 1.0);
                wo.set(tok.value(j), kappa + j - 1, 1.0);
            }
            (
                emb,
                ConvKernel::size2(d, 1.0, 2.0, 1.0, Act::Relu),
                1.0,
                wo,
                None,
                d,
            )
        }
        EmbedMode::Jl => {
            let (k, beta, c0, c1, b) = (10.0, 2.0, 1.0, 10.0, 3.0);
            let m = jl_projection(vocab, eps, jl_seed(seed, 1), DEFAULT_MAX_RESAMPLES)?;
            let p = m.p;
            let d = kappa + p;
            let mut emb = Tensor::zeros(&[tok.size(), d]);
            for i in 1..=kappa {
                emb.set(tok.key(i), i - 1, k);
            }
            let mut wo = Tensor::zeros(&[tok.size(), d]);
            let mut bo = Tensor::zeros(&[tok.size()]);
            for j in 1..=vocab {
                let col = m.column(j - 1);
                for (r, &x) in col.iter().enumerate() {
                    emb.set(tok.value(j), kappa + r, x + beta);
                    wo.set(tok.value(j), kappa + r, x);
                }
                bo.data_mut()[tok.value(j)] =
                    -(c0 * k - b) * (c1 * beta - b) * col.iter().sum::<f64>();
            }
            (
                emb,
                ConvKernel::size2(d, c0, c1, b, Act::Relu),
                1.0 / (c1 * k - b),
                wo,
                Some(bo),
                d,
            )
        }
    };
    let mut cw = shifted_eye(kappa, d, 0);
    cw.data_mut().iter_mut().for_each(|v| *v *= c_scale);
    let block = MambaBlock {
        kind: MixerKind::Mamba,
        vocab: tok.size(),
        d,
        n: kappa,
        classes: tok.size(),
        pe: false,
        simplified: false,
        embedding: emb,
        conv: Some(conv),
        conv_b: None,
        conv_c: None,
        in_proj: None,
        ssm: SsmParams {
            lambda: Tensor::zeros(&[d, kappa]),
            delta_proj: Some(DeltaProj::constant(d, d, 1.0)),
            b_proj: Some(Linear::new(shifted_eye(kappa, d, 0), zero_bias(kappa))?),
            c_proj: Some(Linear::new(cw, zero_bias(kappa))?),
            static_b: None,
            static_c: None,
            disc: InputDisc::Euler,
        },
        gate: None,
        out_proj: Linear::new(wo, bo.or_else(|| zero_bias(tok.size())))?,
        provenance: provenance(
            "mqar_mamba",
            json!({"kappa": kappa, "vocab": vocab, "mode": mode, "epsilon": eps}),
            Some(seed),
        ),
    };
    block.validate()?;
    Ok(block)
}

// MQAR, Mamba-2 (three kernels, no gate)

pub fn build_mqar_mamba2(
    kappa: usize,
    vocab: usize,
    mode: EmbedMode,
    epsilon: Option<f64>,
    seed: u64,
) -> Result<MambaBlock> {
    check_kappa(kappa, vocab)?;
    let tok = MqarTokens { kappa, vocab };
    let eps = epsilon.unwrap_or(DEFAULT_EPSILON);
    let (pk, pv, keys, values): (usize, usize, Vec<Vec<f64>>, Vec<Vec<f64>>) = match mode {
        EmbedMode::Onehot => {
            let unit = |n: usize, i: usize| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                v
            };
            (
                kappa,
                vocab,
                (0..kappa).map(|i| unit(kappa, i)).collect(),
                (0..vocab).map(|j| unit(vocab, j)).collect(),
            )
        }
        EmbedMode::Jl => {
            let mk = jl_projection(kappa, eps, jl_seed(seed, 2), DEFAULT_MAX_RESAMPLES)?;
            let mv = jl_projection(vocab, eps, jl_seed(seed, 3), DEFAULT_MAX_RESAMPLES)?;
            let cols = |m: &JlProjection| (0..m.d()).map(|i| m.column(i)).collect::<Vec<_>>();
            (mk.p, mv.p, cols(&mk), cols(&mv))
        }
    };
    let d = pk + pv;
    let mut emb = Tensor::zeros(&[tok.size(), d]);
    let mut wo = Tensor::zeros(&[tok.size(), d]);
    for (i, kv) in keys.iter().enumerate() {
        for (c, &x) in kv.iter().enumerate() {
            emb.set(tok.key(i + 1), c, x);
        }
    }
    for (j, vv) in values.iter().enumerate() {
        for (c, &x) in vv.iter().enumerate() {
            emb.set(tok.value(j + 1), pk + c, x);
            wo.set(tok.value(j + 1), pk + c, x);
        }
    }
    let wk = shifted_eye(pk, d, 0);
    let block = MambaBlock {
        kind: MixerKind::Mamba2,
        vocab: tok.size(),
        d,
        n: pk,
        classes: tok.size(),
        pe: false,
        simplified: false,
        embedding: emb,
        conv: Some(ConvKernel::identity(d)),
        conv_b: Some(ConvKernel::shift_right(pk)),
        conv_c: Some(ConvKernel::identity(pk)),
        in_proj: Some(Linear::new(Tensor::identity(d), None)?),
        ssm: SsmParams {
            lambda: Tensor::zeros(&[1]),
            delta_proj: Some(DeltaProj::constant(1, d, 1.0)),
            b_proj: Some(Linear::new(wk.clone(), zero_bias(pk))?),
            c_proj: Some(Linear::new(wk, zero_bias(pk))?),
            static_b: None,
            static_c: None,
            disc: InputDisc::Euler,
        },
        gate: None,
        out_proj: Linear::new(wo, zero_bias(tok.size()))?,
        provenance: provenance(
            "mqar_mamba2",
            json!({"kappa": kappa, "vocab": vocab, "mode": mode, "epsilon": eps}),
            Some(seed),
        ),
    };
    block.validate()?;
    Ok(block)
}

// MQAR, gated S4D

/// Gated S4D block. With `gated = false` the gate is removed entirely
/// (`ỹ = y`), which is the negative control.
pub fn build_mqar_s4d(
    kappa: usize,
    vocab: usize,
    mode: EmbedMode,
    epsilon: Option<f64>,
    seed: u64,
    gated: bool,
) -> Result<MambaBlock> {
    check_kappa(kappa, vocab)?;
    let tok = MqarTokens { kappa, vocab };
    let eps = epsilon.unwrap_or(DEFAULT_EPSILON);
    let k = 10.0;
    // per-chunk value vectors and the head row for each value
    let (p, vals, heads, beta): (usize, Vec<Vec<f64>>, Vec<Vec<f64>>, f64) = match mode {
        EmbedMode::Onehot => {
            let unit = |j: usize| {
                let mut v = vec![0.0; vocab];
                v[j] = 1.0;
                v
            };
            (
                vocab,
                (0..vocab).map(unit).collect(),
                (0..vocab).map(unit).collect(),
                0.0,
            )
        }
        EmbedMode::Jl => {
            let beta = 1.0;
            let m = jl_projection_with_ones(vocab, eps, jl_seed(seed, 4), DEFAULT_MAX_RESAMPLES)?;
            let cols: Vec<Vec<f64>> = (0..vocab).map(|j| m.column(j)).collect();
            let vals = cols
                .iter()
                .map(|c| c.iter().map(|x| x + beta).collect())
                .collect();
            (m.p, vals, cols, beta)
        }
    };
    let d = kappa * p;
    let mut emb = Tensor::zeros(&[tok.size(), d]);
    let mut wo = Tensor::zeros(&[tok.size(), d]);
    let mut bo = Tensor::zeros(&[tok.size()]);
    for i in 0..kappa {
        for c in 0..p {
            emb.set(tok.key(i + 1), i * p + c, k);
        }
    }
    for j in 0..vocab {
        for i in 0..kappa {
            for c in 0..p {
                emb.set(tok.value(j + 1), i * p + c, vals[j][c]);
                wo.set(tok.value(j + 1), i * p + c, heads[j][c]);
            }
        }
        bo.data_mut()[tok.value(j + 1)] = -k * beta * heads[j].iter().sum::<f64>();
    }
    let block = MambaBlock {
        kind: MixerKind::S4d,
        vocab: tok.size(),
        d,
        n: 1,
        classes: tok.size(),
        pe: false,
        simplified: false,
        embedding: emb,
        conv: Some(ConvKernel::size2(d, 10.0, 1.0, k * 10.0, Act::Relu)),
        conv_b: None,
        conv_c: None,
        in_proj: None,
        ssm: SsmParams {
            lambda: Tensor::zeros(&[d, 1]),
            delta_proj: None,
            b_proj: None,
            c_proj: None,
            static_b: Some(Tensor::full(&[1], 1.0)),
            static_c: Some(Tensor::full(&[1], 1.0)),
            disc: InputDisc::Euler,
        },
        gate: gated.then(|| Gate {
            linear: Linear {
                weight: Tensor::identity(d),
                bias: zero_bias(d),
            },
            act: Act::Relu,
        }),
        out_proj: Linear::new(wo, Some(bo))?,
        provenance: provenance(
            "mqar_s4d",
            json!({"kappa": kappa, "vocab": vocab, "mode": mode, "epsilon": eps, "gated": gated}),
            Some(seed),
        ),
    };
    block.validate()?;
    Ok(block)
}

// Induction heads, Mamba-Δᵀ

/// Mamba-Δᵀ block with the doubled embedding `[e_v; e_v]`.
///
/// `Δ = softplus(w([I|0]x̂ - 1/2))` erases exactly the state column of the
/// previous token; the bias keeps the other columns at Δ ≈ 0 instead of ln 2.
pub fn build_induction_heads_dt(vocab: usize, w_delta: f64) -> Result<MambaBlock> {
    if vocab == 0 {
        bail_invalid!("vocab must be positive");
    }
    if w_delta < 1e2 {
        bail_invalid!("w_delta must be >= 1e2, got {}", w_delta);
    }
    let v = vocab;
    let d = 2 * v;
    let mut emb = Tensor::zeros(&[v + 1, d]);
    let mut wo = Tensor::zeros(&[v + 1, d]);
    for tok in 1..=v {
        emb.set(tok, tok - 1, 1.0);
        emb.set(tok, v + tok - 1, 1.0);
        wo.set(tok, v + tok - 1, 1.0);
    }
    let mut c = Tensor::zeros(&[2, d]);
    c.data_mut()[..v].fill(1.0);
    c.data_mut()[d + v..].fill(1.0);
    let mut dw = shifted_eye(v, d, 0);
    dw.data_mut().iter_mut().for_each(|x| *x *= w_delta);
    let block = MambaBlock {
        kind: MixerKind::MambaDt,
        vocab: v + 1,
        d,
        n: v,
        classes: v + 1,
        pe: false,
        simplified: false,
        embedding: emb,
        conv: Some(ConvKernel::new(c, Tensor::zeros(&[d]), Act::Identity)?),
        conv_b: None,
        conv_c: None,
        in_proj: None,
        ssm: SsmParams {
            lambda: Tensor::full(&[d, v], 1.0),
            delta_proj: Some(DeltaProj::full(Linear::new(
                dw,
                Some(Tensor::full(&[v], -w_delta / 2.0)),
            )?)),
            b_proj: Some(Linear::new(shifted_eye(v, d, 0), zero_bias(v))?),
            c_proj: Some(Linear::new(shifted_eye(v, d, v), zero_bias(v))?),
            static_b: None,
            static_c: None,
            disc: InputDisc::Euler,
        },
        gate: None,
        out_proj: Linear::new(wo, zero_bias(v + 1))?,
        provenance: provenance(
            "induction_heads_dt",
            json!({"vocab": vocab, "w_delta": w_delta}),
            None,
        ),
    };
    block.validate()?;
    Ok(block)
}

// Time recovery

/// Scalar SSM with λ = 0 and B = C = 1: the state counts its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeRecovery {
    pub lambda: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

pub fn build_time_recovery() -> TimeRecovery {
    TimeRecovery {
        lambda: Tensor::zeros(&[1, 1]),
        b: Tensor::full(&[1], 1.0),
        c: Tensor::full(&[1], 1.0),
    }
}

impl TimeRecovery {
    /// States `h_1..h_T` on a scalar input sequence.
    pub fn run(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xhat = Tensor::new(vec![x.len(), 1], x.to_vec())?;
        let inp =
            ScanInputs::from_tensors(MixerKind::S4d, &self.lambda, &xhat, None, &self.b, &self.c)?;
        Ok(scan_sequential(&inp)?.y.into_data())
    }
}
