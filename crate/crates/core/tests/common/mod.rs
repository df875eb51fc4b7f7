#![allow(dead_code)]

use rand::Rng;
use ssm_core::analysis::{ScalarSsm, SensKind};
use ssm_core::mixers::{InputDisc, MixerKind, ScanInputs};

/// Random scalar-input SSM and input with T ≤ 64 and moderate total decay, so
/// the sensitivities stay well above finite-difference roundoff.
pub fn random_scalar_ssm<R: Rng>(rng: &mut R, kind: SensKind) -> (ScalarSsm, Vec<f64>) {
    let tl = rng.gen_range(2..=64);
    let n = 4;
    let x: Vec<f64> = (0..tl).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lambda: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(0.0..2.0) / tl as f64)
        .collect();
    let b_b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let model = match kind {
        SensKind::S4d => ScalarSsm::s4d(lambda, b_b),
        SensKind::S6 => ScalarSsm {
            kind,
            lambda,
            w_b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            b_b,
            w_delta: rng.gen_range(-1.5..1.5),
            b_delta: rng.gen_range(-2.0..0.5),
        },
    };
    (model, x)
}

/// Random `(t, j)` with `1 <= j < t <= T`.
pub fn random_pair<R: Rng>(rng: &mut R, tl: usize) -> (usize, usize) {
    let t = rng.gen_range(2..=tl);
    (t, rng.gen_range(1..t))
}

/// Owned operands for one random scan.
pub struct Case {
    pub kind: MixerKind,
    pub d: usize,
    pub n: usize,
    pub t: usize,
    pub lambda: Vec<f64>,
    pub xhat: Vec<f64>,
    pub delta: Option<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl Case {
    pub fn random<R: Rng>(kind: MixerKind, d: usize, n: usize, t: usize, rng: &mut R) -> Case {
        let mut u = |len: usize, lo: f64, hi: f64| {
            (0..len)
                .map(|_| rng.gen_range(lo..hi))
                .collect::<Vec<f64>>()
        };
        let lambda = u(kind.lambda_len(d, n), 0.0, 3.0);
        let xhat = u(t * d, -2.0, 2.0);
        let delta = (kind != MixerKind::S4d).then(|| u(t * kind.delta_width(d, n), 0.0, 2.0));
        let bc_len = if kind == MixerKind::S4d { n } else { t * n };
        let b = u(bc_len, -2.0, 2.0);
        let c = u(bc_len, -2.0, 2.0);
        Case {
            kind,
            d,
            n,
            t,
            lambda,
            xhat,
            delta,
            b,
            c,
        }
    }

    pub fn inputs(&self) -> ScanInputs<'_> {
        ScanInputs {
            kind: self.kind,
            d: self.d,
            n: self.n,
            t: self.t,
            lambda: &self.lambda,
            xhat: &self.xhat,
            delta: self.delta.as_deref(),
            b: &self.b,
            c: &self.c,
            static_bc: self.kind == MixerKind::S4d,
            disc: InputDisc::Euler,
        }
    }
}
