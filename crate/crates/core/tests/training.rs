use proptest::prelude::*;
use ssm_core::mixers::{Evaluator, MambaBlock, MixerKind, ScanAlgo};
use ssm_core::tasks::{block_accuracy, dataset, Split, TaskConfig};
use ssm_core::tensor_core::{Graph, Tensor};
use ssm_core::training::*;
use ssm_core::Error;

fn small_cfg(kind: MixerKind, simplified: bool, pe: bool) -> ModelConfig {
    ModelConfig {
        kind,
        d: 4,
        n: 2,
        vocab: 6,
        classes: 6,
        pe,
        simplified,
    }
}

fn loss_of(model: &TrainModel, seqs: &[Vec<usize>], targets: &[usize]) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let ids = model.register(&mut g);
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let y = model.mixer_graph(&mut g, &ids, &refs).unwrap();
    let rows: Vec<usize> = (0..targets.len()).collect();
    let logits = model.head_graph(&mut g, &ids, y, &rows).unwrap();
    let loss = g
        .cross_entropy(logits, targets, &vec![true; rows.len()])
        .unwrap();
    g.backward(loss).unwrap();
    let v = g.value(loss).data()[0];
    let grads = ids
        .iter()
        .zip(&model.params)
        .map(|(&i, p)| {
            g.grad(i)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    (v, grads)
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = OptimConfig::default();
    assert_eq!(cosine_lr(0, &cfg), 0.03);
    assert!((cosine_lr(cfg.epochs - 1, &cfg) - 1e-6).abs() < 1e-18);
    let odd = OptimConfig { epochs: 601, ..cfg };
    assert!((cosine_lr(300, &odd) - (0.03 + 1e-6) / 2.0).abs() < 1e-15);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let cfg = OptimConfig::default();
    let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
    let before = p.clone();
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 0.1, &cfg).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_moves_by_lr_sign() {
    let cfg = OptimConfig::default();
    let mut p = vec![Tensor::zeros(&[3])];
    let mut st = AdamState::new(&p);
    let g = Tensor::new(vec![3], vec![0.3, -5.0, 1e-3]).unwrap();
    adam_step(&mut p, &[g], &mut st, 0.01, &cfg).unwrap();
    for (v, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0]) {
        assert!((v - 0.01 * s).abs() < 1e-7, "{v}");
    }
}

#[test]
fn adam_matches_reference_on_a_quadratic() {
    // f(p) = Σ a_i (p_i - c_i)^2
    let a = [1.0, 10.0, 0.1];
    let c = [0.5, -1.0, 3.0];
    let cfg = OptimConfig::default();
    let lr = 0.05;
    let mut p = vec![Tensor::zeros(&[3])];
    let mut st = AdamState::new(&p);
    let (mut q, mut m, mut v) = ([0.0f64; 3], [0.0f64; 3], [0.0f64; 3]);
    for step in 1..=100 {
        let g: Vec<f64> = (0..3)
            .map(|i| 2.0 * a[i] * (p[0].data()[i] - c[i]))
            .collect();
        adam_step(
            &mut p,
            &[Tensor::new(vec![3], g).unwrap()],
            &mut st,
            lr,
            &cfg,
        )
        .unwrap();
        for i in 0..3 {
            let gi = 2.0 * a[i] * (q[i] - c[i]);
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(step));
            let vh = v[i] / (1.0 - 0.999f64.powi(step));
            q[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    for i in 0..3 {
        assert!((p[0].data()[i] - q[i]).abs() < 1e-10);
    }
}

#[test]
fn adam_rejects_nan() {
    let cfg = OptimConfig::default();
    let mut p = vec![Tensor::zeros(&[2])];
    let mut st = AdamState::new(&p);
    let g = Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap();
    let err = adam_step(&mut p, &[g], &mut st, 0.1, &cfg).unwrap_err();
    assert!(err.to_string().contains("non-finite"));
    assert_eq!(st.step, 0);
}

#[test]
fn config_validation() {
    assert!(OptimConfig {
        lr_final: 0.1,
        lr_init: 0.01,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(OptimConfig {
        epochs: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(OptimConfig::desk().validate().is_ok());
}

#[test]
fn keep_fifth_parameter_count() {
    let v = TaskConfig::keep_nth(5, 50, 128, 0).num_tokens();
    let cfg = ModelConfig {
        kind: MixerKind::Mamba,
        d: 32,
        n: 8,
        vocab: v,
        classes: v,
        pe: true,
        simplified: true,
    };
    let m = TrainModel::init(cfg, 0).unwrap();
    let count = m.num_params();
    assert!((count as f64 - 9200.0).abs() <= 0.05 * 9200.0, "{count}");
    let block = m.to_block(None).unwrap();
    assert_eq!(block.num_params(), count);
    let back = MambaBlock::from_json(&block.to_json().unwrap()).unwrap();
    assert_eq!(back.num_params(), count);
}

#[test]
fn graph_forward_matches_block() {
    for kind in MixerKind::ALL {
        for (simplified, pe) in [(true, true), (false, false), (false, true)] {
            let m = TrainModel::init(small_cfg(kind, simplified, pe), 3).unwrap();
            let block = m.to_block(None).unwrap();
            let seqs = vec![vec![1, 2, 3, 0, 5, 4, 4], vec![5, 5, 1, 2, 0, 3, 1]];
            let mut g = Graph::new();
            let ids = m.register(&mut g);
            let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
            let y = m.mixer_graph(&mut g, &ids, &refs).unwrap();
            let rows: Vec<usize> = (0..14).collect();
            let logits = m.head_graph(&mut g, &ids, y, &rows).unwrap();
            let ev = Evaluator::new(&block).unwrap();
            for (s, seq) in seqs.iter().enumerate() {
                let want = ev.trace(seq, ScanAlgo::Sequential).unwrap().logits;
                for t in 0..7 {
                    for (a, b) in g.value(logits).row(s * 7 + t).iter().zip(want.row(t)) {
                        assert!((a - b).abs() < 1e-12, "{kind:?} {simplified} {pe}");
                    }
                }
            }
        }
    }
}

#[test]
fn full_block_gradients_match_finite_differences() {
    let seqs = vec![vec![1, 2, 3, 0, 5, 4], vec![2, 2, 1, 5, 3, 0]];
    let targets: Vec<usize> = (0..12).map(|i| (i * 7 + 1) % 6).collect();
    for kind in MixerKind::ALL {
        let mut m = TrainModel::init(small_cfg(kind, false, true), 5).unwrap();
        let (_, grads) = loss_of(&m, &seqs, &targets);
        let h = 1e-6;
        for pi in 0..m.params.len() {
            for e in 0..m.params[pi].len() {
                let orig = m.params[pi].data()[e];
                m.params[pi].data_mut()[e] = orig + h;
                let (lp, _) = loss_of(&m, &seqs, &targets);
                m.params[pi].data_mut()[e] = orig - h;
                let (lm, _) = loss_of(&m, &seqs, &targets);
                m.params[pi].data_mut()[e] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[pi].data()[e];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-5, "{kind:?} param {pi} entry {e}: {an} vs {fd}");
            }
        }
    }
}

#[test]
fn zero_learning_rate_keeps_initial_accuracy() {
    let task = TaskConfig::keep_nth(2, 8, 4, 1);
    let v = task.num_tokens();
    let model = ModelConfig {
        kind: MixerKind::Mamba,
        d: 4,
        n: 2,
        vocab: v,
        classes: v,
        pe: true,
        simplified: true,
    };
    let optim = OptimConfig {
        lr_init: 0.0,
        lr_final: 0.0,
        epochs: 2,
        batch_size: 8,
        ..Default::default()
    };
    let cfg = RunConfig {
        model,
        task,
        optim,
        sizes: DataSizes {
            train: 32,
            val: 16,
            test: 64,
        },
    };
    let r = train(&cfg).unwrap();
    assert_eq!(r.record.test_accuracy, r.record.init_test_accuracy);
    let init = TrainModel::init(model, 0).unwrap().to_block(None).unwrap();
    assert_eq!(r.model.embedding, init.embedding);
    assert_eq!(r.model.out_proj, init.out_proj);
}

#[test]
fn training_is_deterministic() {
    let task = TaskConfig::keep_nth(2, 8, 4, 1);
    let v = task.num_tokens();
    let model = ModelConfig {
        kind: MixerKind::Mamba2,
        d: 4,
        n: 2,
        vocab: v,
        classes: v,
        pe: true,
        simplified: false,
    };
    let optim = OptimConfig {
        epochs: 3,
        batch_size: 8,
        seed: 9,
        ..Default::default()
    };
    let cfg = RunConfig {
        model,
        task,
        optim,
        sizes: DataSizes {
            train: 64,
            val: 16,
            test: 32,
        },
    };
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a.record).unwrap(),
        serde_json::to_string(&b.record).unwrap()
    );
    assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
    assert_eq!(a.record.epochs, 3);
    assert_eq!(a.record.stopped_by, StopReason::MaxEpochs);
}

#[test]
fn early_stop_on_a_trivial_task() {
    // One token: the answer never varies, so the loss can be driven to zero.
    let task = TaskConfig::keep_nth(1, 4, 1, 0);
    let v = task.num_tokens();
    let model = ModelConfig {
        kind: MixerKind::Mamba,
        d: 4,
        n: 2,
        vocab: v,
        classes: v,
        pe: false,
        simplified: true,
    };
    let optim = OptimConfig {
        lr_init: 0.5,
        lr_final: 0.5,
        epochs: 50,
        batch_size: 16,
        ..Default::default()
    };
    let cfg = RunConfig {
        model,
        task,
        optim,
        sizes: DataSizes {
            train: 512,
            val: 16,
            test: 16,
        },
    };
    let r = train(&cfg).unwrap();
    assert_eq!(r.record.stopped_by, StopReason::ValLoss);
    assert!(r.record.epochs <= 2, "{}", r.record.epochs);
    assert_eq!(r.record.test_accuracy, 1.0);
}

#[test]
fn mismatched_classes_are_rejected() {
    let task = TaskConfig::keep_nth(2, 8, 4, 1);
    let model = ModelConfig {
        kind: MixerKind::Mamba,
        d: 4,
        n: 2,
        vocab: 5,
        classes: 3,
        pe: false,
        simplified: true,
    };
    let cfg = RunConfig {
        model,
        task,
        optim: OptimConfig::default(),
        sizes: DataSizes::default(),
    };
    assert!(matches!(train(&cfg), Err(Error::Invalid(_))));
}

#[test]
fn huge_learning_rate_reports_divergence_with_checkpoint() {
    let task = TaskConfig::keep_nth(2, 8, 4, 1);
    let v = task.num_tokens();
    let model = ModelConfig {
        kind: MixerKind::Mamba,
        d: 4,
        n: 2,
        vocab: v,
        classes: v,
        pe: true,
        simplified: true,
    };
    let optim = OptimConfig {
        lr_init: 1e300,
        lr_final: 1e300,
        epochs: 5,
        batch_size: 8,
        ..Default::default()
    };
    let cfg = RunConfig {
        model,
        task,
        optim,
        sizes: DataSizes {
            train: 64,
            val: 16,
            test: 16,
        },
    };
    match train(&cfg) {
        Err(Error::Diverged { checkpoint, .. }) => {
            let block = MambaBlock::from_json(&checkpoint.expect("checkpoint")).unwrap();
            assert!(block.embedding.data().iter().all(|v| v.is_finite()));
        }
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|r| r.record.stopped_by)
        ),
    }
}

#[test]
fn init_accuracy_is_reproducible() {
    let task = TaskConfig::keep_nth(2, 8, 4, 1);
    let v = task.num_tokens();
    let model = ModelConfig {
        kind: MixerKind::S4d,
        d: 4,
        n: 2,
        vocab: v,
        classes: v,
        pe: true,
        simplified: true,
    };
    let test = dataset(&task, Split::Test, 32).unwrap();
    let a = block_accuracy(
        &TrainModel::init(model, 4).unwrap().to_block(None).unwrap(),
        &test,
    )
    .unwrap();
    let b = block_accuracy(
        &TrainModel::init(model, 4).unwrap().to_block(None).unwrap(),
        &test,
    )
    .unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Changing a later token leaves earlier logits unchanged in the full block.
    #[test]
    fn full_block_is_causal(seed in 0u64..1000, pos in 1usize..7, tok in 0usize..6, k in 0usize..4) {
        let kind = MixerKind::ALL[k];
        let block = TrainModel::init(small_cfg(kind, false, false), seed).unwrap().to_block(None).unwrap();
        let ev = Evaluator::new(&block).unwrap();
        let a: Vec<usize> = (0..8).map(|i| (i * 5 + seed as usize) % 6).collect();
        let mut b = a.clone();
        b[pos] = tok;
        let la = ev.forward(&a).unwrap();
        let lb = ev.forward(&b).unwrap();
        for t in 0..pos {
            prop_assert_eq!(la.row(t), lb.row(t));
        }
    }
}
