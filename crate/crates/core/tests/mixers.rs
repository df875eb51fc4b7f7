mod common;

use common::Case;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssm_core::constructions::build_mqar_mamba;
use ssm_core::mixers::*;
use ssm_core::tensor_core::Tensor;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn zoh_matches_quadrature() {
    let (lam, dt, b) = (2.0f64, 0.3f64, 1.5f64);
    let (lbar, bbar) = zoh_discretize(lam, dt, b).unwrap();
    // Simpson on ∫_0^Δ e^{-λ s} ds · b
    let m = 20_000;
    let h = dt / m as f64;
    let f = |s: f64| (-lam * s).exp();
    let mut acc = f(0.0) + f(dt);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    let quad = acc * h / 3.0 * b;
    assert!((bbar - quad).abs() < 1e-10, "{bbar} vs {quad}");
    assert!((lbar - (-0.6f64).exp()).abs() < 1e-15);
}

#[test]
fn euler_is_first_order_close_to_zoh() {
    let (lam, b) = (1.7, 0.9);
    let errs: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&dt| (euler_discretize_b(dt, b) - zoh_discretize(lam, dt, b).unwrap().1).abs())
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((80.0..125.0).contains(&ratio), "ratio {ratio}");
    }
    // leading term λΔ²b/2
    assert!((errs[2] - lam * 1e-6 * b / 2.0).abs() < 1e-9);
}

#[test]
fn zero_rate_unit_step_is_cumulative_sum() {
    let x = [0.5, -1.0, 2.0, 3.5];
    let xhat = Tensor::new(vec![4, 1], x.to_vec()).unwrap();
    let lambda = Tensor::zeros(&[1, 1]);
    let delta = Tensor::full(&[4, 1], 1.0);
    let bc = Tensor::full(&[4, 1], 1.0);
    let inp =
        ScanInputs::from_tensors(MixerKind::Mamba, &lambda, &xhat, Some(&delta), &bc, &bc).unwrap();
    let y = scan_sequential(&inp).unwrap().y.into_data();
    assert_eq!(y, vec![0.5, -0.5, 1.5, 5.0]);
}

#[test]
fn all_ones_input_recovers_time() {
    let xhat = Tensor::full(&[9, 1], 1.0);
    let lambda = Tensor::zeros(&[1, 1]);
    let one = Tensor::full(&[1], 1.0);
    let inp = ScanInputs::from_tensors(MixerKind::S4d, &lambda, &xhat, None, &one, &one).unwrap();
    let out = scan_sequential(&inp).unwrap();
    assert_eq!(out.y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    assert_eq!(out.final_state.unwrap().data(), &[9.0]);
}

/// h_t = Σ_{s≤t} (Π_{r=s+1}^t e^{-λΔ_r}) Δ_s x̂_s B_s, evaluated term by term.
#[test]
fn mamba_scan_matches_unrolled_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let case = Case::random(MixerKind::Mamba, 3, 2, 5, &mut rng);
    let y = scan_sequential(&case.inputs()).unwrap().y.into_data();
    let (d, n) = (3, 2);
    let dl = case.delta.as_ref().unwrap();
    for t in 0..5 {
        for i in 0..d {
            let mut yi = 0.0;
            for k in 0..n {
                let lam = case.lambda[i * n + k];
                let mut h = 0.0;
                for s in 0..=t {
                    let mut prod = 1.0;
                    for r in s + 1..=t {
                        prod *= (-lam * dl[r * d + i]).exp();
                    }
                    h += prod * dl[s * d + i] * case.xhat[s * d + i] * case.b[s * n + k];
                }
                yi += h * case.c[t * n + k];
            }
            assert!((y[t * d + i] - yi).abs() < 1e-12);
        }
    }
}

#[test]
fn mamba_dt_does_not_scale_input() {
    // Δ along the state axis; with λ = 0 the Δ values must not matter.
    let xhat = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
    let lambda = Tensor::zeros(&[1, 2]);
    let delta = Tensor::new(vec![2, 2], vec![5.0, 0.1, 3.0, 7.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let c = Tensor::full(&[2, 2], 1.0);
    let inp =
        ScanInputs::from_tensors(MixerKind::MambaDt, &lambda, &xhat, Some(&delta), &b, &c).unwrap();
    assert_eq!(scan_sequential(&inp).unwrap().y.data(), &[1.0, 3.0]);
}

#[test]
fn parallel_matches_sequential_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for kind in MixerKind::ALL {
        for _ in 0..100 {
            let (d, n, t) = (
                rng.gen_range(1..5),
                rng.gen_range(1..5),
                rng.gen_range(1..40),
            );
            let case = Case::random(kind, d, n, t, &mut rng);
            let seq = scan_sequential(&case.inputs()).unwrap();
            let par = scan_parallel(&case.inputs()).unwrap();
            worst = worst.max(max_diff(seq.y.data(), par.y.data()));
            worst = worst.max(max_diff(
                seq.final_state.unwrap().data(),
                par.final_state.unwrap().data(),
            ));
            if kind == MixerKind::Mamba2 {
                worst = worst.max(max_diff(
                    seq.y.data(),
                    scan_dual(&case.inputs()).unwrap().y.data(),
                ));
            }
        }
    }
    assert!(worst <= 1e-12, "max diff {worst}");
}

#[test]
fn single_step_and_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in MixerKind::ALL {
        let case = Case::random(kind, 2, 3, 1, &mut rng);
        let inp = case.inputs();
        let y = scan_parallel(&inp).unwrap().y.into_data();
        for i in 0..2 {
            let mut e = 0.0;
            for k in 0..3 {
                let dl = match kind {
                    MixerKind::S4d => 1.0,
                    MixerKind::Mamba => case.delta.as_ref().unwrap()[i],
                    MixerKind::Mamba2 => case.delta.as_ref().unwrap()[0],
                    MixerKind::MambaDt => 1.0,
                };
                e += dl * case.xhat[i] * case.b[k] * case.c[k];
            }
            assert!((y[i] - e).abs() < 1e-14);
        }
        let mut zero = Case::random(kind, 2, 3, 6, &mut rng);
        zero.xhat.iter_mut().for_each(|x| *x = 0.0);
        assert!(scan_parallel(&zero.inputs())
            .unwrap()
            .y
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(scan_sequential(&zero.inputs())
            .unwrap()
            .y
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}

#[test]
fn s4d_is_mamba_with_unit_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s4d = Case::random(MixerKind::S4d, 3, 4, 12, &mut rng);
    let tile = |v: &[f64]| {
        (0..12)
            .flat_map(|_| v.iter().copied())
            .collect::<Vec<f64>>()
    };
    let mamba = Case {
        kind: MixerKind::Mamba,
        delta: Some(vec![1.0; 12 * 3]),
        b: tile(&s4d.b),
        c: tile(&s4d.c),
        lambda: s4d.lambda.clone(),
        xhat: s4d.xhat.clone(),
        ..s4d
    };
    let s4d = Case {
        kind: MixerKind::S4d,
        delta: None,
        b: s4d_b(&mamba),
        c: s4d_c(&mamba),
        lambda: mamba.lambda.clone(),
        xhat: mamba.xhat.clone(),
        ..mamba
    };
    let a = scan_sequential(&s4d.inputs()).unwrap();
    let b = scan_sequential(&mamba.inputs()).unwrap();
    assert_eq!(a, b);
}

fn s4d_b(c: &Case) -> Vec<f64> {
    c.b[..c.n].to_vec()
}

fn s4d_c(c: &Case) -> Vec<f64> {
    c.c[..c.n].to_vec()
}

#[test]
fn decay_factors_lie_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in MixerKind::ALL {
        let case = Case::random(kind, 3, 2, 20, &mut rng);
        assert!(case
            .inputs()
            .decay_factors()
            .iter()
            .all(|&a| a > 0.0 && a <= 1.0));
    }
}

#[test]
fn negative_rates_and_steps_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut case = Case::random(MixerKind::Mamba, 2, 2, 3, &mut rng);
    case.lambda[0] = -0.1;
    assert!(scan_sequential(&case.inputs()).is_err());
    let mut case = Case::random(MixerKind::Mamba, 2, 2, 3, &mut rng);
    case.delta.as_mut().unwrap()[1] = -1.0;
    assert!(scan_parallel(&case.inputs()).is_err());
    case.delta = Some(vec![1.0; 5]);
    assert!(scan_sequential(&case.inputs()).is_err());
}

#[test]
fn zoh_and_euler_outputs_agree_to_second_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = Case::random(MixerKind::Mamba, 2, 3, 10, &mut rng);
    let mut errs = vec![];
    for scale in [1e-2, 1e-3, 1e-4] {
        let case = Case {
            delta: Some(
                base.delta
                    .as_ref()
                    .unwrap()
                    .iter()
                    .map(|x| x * scale)
                    .collect(),
            ),
            lambda: base.lambda.clone(),
            xhat: base.xhat.clone(),
            b: base.b.clone(),
            c: base.c.clone(),
            ..base
        };
        let e = scan_sequential(&case.inputs()).unwrap();
        let z = scan_sequential(&case.inputs().with_disc(InputDisc::Zoh)).unwrap();
        errs.push(max_diff(e.y.data(), z.y.data()));
    }
    for w in errs.windows(2) {
        assert!(w[0] / w[1] > 80.0, "{errs:?}");
    }
}

#[test]
fn conv_examples() {
    let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let shifted = short_conv(&ConvKernel::shift_right(2), &x).unwrap();
    assert_eq!(shifted.data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    let id1 = ConvKernel::new(
        Tensor::full(&[1, 2], 1.0),
        Tensor::zeros(&[2]),
        Act::Identity,
    )
    .unwrap();
    assert_eq!(short_conv(&id1, &x).unwrap(), x);
    // key 2·e_1 then value e_3 (κ = 2): conv gives e_1 + e_3
    let x = Tensor::new(vec![2, 4], vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let k = ConvKernel::size2(4, 1.0, 2.0, 1.0, Act::Relu);
    assert_eq!(short_conv(&k, &x).unwrap().row(1), &[1.0, 0.0, 1.0, 0.0]);
    // width may exceed T
    let wide = ConvKernel::new(
        Tensor::full(&[5, 1], 1.0),
        Tensor::zeros(&[1]),
        Act::Identity,
    )
    .unwrap();
    let x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
    assert_eq!(short_conv(&wide, &x).unwrap().data(), &[1.0, 3.0]);
}

#[test]
fn gate_examples() {
    let y = Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap();
    let x = Tensor::new(vec![1, 3], vec![0.3, 0.0, -4.0]).unwrap();
    let big = Gate {
        linear: Linear::new(Tensor::zeros(&[3, 3]), Some(Tensor::full(&[3], 1e4))).unwrap(),
        act: Act::Silu,
    };
    let out = gate(&big, &x, &y).unwrap();
    assert!(max_diff(out.data(), &[1e4, -2e4, 3e4]) < 1e-6);
    let unit = Gate {
        linear: Linear::new(Tensor::zeros(&[3, 3]), Some(Tensor::full(&[3], 1.0))).unwrap(),
        act: Act::Identity,
    };
    assert_eq!(gate(&unit, &x, &y).unwrap(), y);
    // relu(e_2 selector) keeps only the second component
    let sel = Gate {
        linear: Linear::new(
            Tensor::zeros(&[3, 3]),
            Some(Tensor::vector(vec![-1.0, 1.0, -1.0])),
        )
        .unwrap(),
        act: Act::Relu,
    };
    assert_eq!(gate(&sel, &x, &y).unwrap().data(), &[0.0, -2.0, 0.0]);
    // random case against an elementwise oracle
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = Gate {
        linear: Linear::new(Tensor::new(vec![3, 3], w.clone()).unwrap(), None).unwrap(),
        act: Act::Silu,
    };
    let out = gate(&g, &x, &y).unwrap();
    for i in 0..3 {
        let pre: f64 = (0..3).map(|j| w[i * 3 + j] * x.data()[j]).sum();
        let want = pre / (1.0 + (-pre).exp()) * y.data()[i];
        assert!((out.data()[i] - want).abs() < 1e-14);
    }
}

#[test]
fn zero_head_gives_zero_logits_and_bad_tokens_fail() {
    let mut block =
        build_mqar_mamba(2, 3, ssm_core::constructions::EmbedMode::Onehot, None, 0).unwrap();
    block.out_proj = Linear::zeros(block.classes, block.d, true);
    let logits = block_forward(&block, &[1, 3, 2, 4, 2, 1]).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    assert!(block_forward(&block, &[1, 99]).is_err());
}

#[test]
fn model_json_round_trip_is_bit_exact() {
    let mut block =
        build_mqar_mamba(2, 3, ssm_core::constructions::EmbedMode::Onehot, None, 0).unwrap();
    block.out_proj.weight.data_mut()[0] = 0.1 + 0.2;
    block.embedding.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
    let back = MambaBlock::from_json(&block.to_json().unwrap()).unwrap();
    assert_eq!(back, block);
    let bits = |b: &MambaBlock| {
        b.out_proj
            .weight
            .data()
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&back), bits(&block));
}

#[test]
fn malformed_model_json_is_rejected() {
    let block =
        build_mqar_mamba(2, 3, ssm_core::constructions::EmbedMode::Onehot, None, 0).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&block.to_json().unwrap()).unwrap();
    v["d"] = serde_json::json!(7);
    assert!(MambaBlock::from_json(&v.to_string()).is_err());
    assert!(MambaBlock::from_json("{").is_err());
}

fn kind_strategy() -> impl Strategy<Value = MixerKind> {
    prop_oneof![
        Just(MixerKind::S4d),
        Just(MixerKind::Mamba),
        Just(MixerKind::Mamba2),
        Just(MixerKind::MambaDt)
    ]
}

proptest! {
    #[test]
    fn prop_parallel_equals_sequential(kind in kind_strategy(), d in 1usize..4, n in 1usize..4, t in 1usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = Case::random(kind, d, n, t, &mut rng);
        let a = scan_sequential(&case.inputs()).unwrap();
        let b = scan_parallel(&case.inputs()).unwrap();
        prop_assert!(max_diff(a.y.data(), b.y.data()) <= 1e-12);
    }

    #[test]
    fn prop_decays_in_unit_interval(kind in kind_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = Case::random(kind, 2, 2, 8, &mut rng);
        prop_assert!(case.inputs().decay_factors().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn prop_causal(kind in kind_strategy(), t0 in 0usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = Case::random(kind, 2, 3, 10, &mut rng);
        let base = scan_sequential(&case.inputs()).unwrap().y.into_data();
        let mut pert = Case { xhat: case.xhat.clone(), lambda: case.lambda.clone(), delta: case.delta.clone(), b: case.b.clone(), c: case.c.clone(), ..case };
        for v in pert.xhat[(t0 + 1) * 2..].iter_mut() { *v += 1.0; }
        if let (Some(dl), MixerKind::Mamba | MixerKind::Mamba2 | MixerKind::MambaDt) = (pert.delta.as_mut(), kind) {
            let w = kind.delta_width(2, 3);
            for v in dl[(t0 + 1) * w..].iter_mut() { *v += 0.5; }
        }
        let y = scan_sequential(&pert.inputs()).unwrap().y.into_data();
        prop_assert_eq!(&y[..(t0 + 1) * 2], &base[..(t0 + 1) * 2]);
    }
}
