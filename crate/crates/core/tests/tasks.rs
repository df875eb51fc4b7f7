use proptest::prelude::*;
use ssm_core::tasks::*;

/// Quadratic scan back for the latest previous occurrence.
fn induction_oracle(x: &[usize]) -> Vec<usize> {
    (0..x.len())
        .map(|i| {
            (0..i)
                .rev()
                .find(|&j| x[j] == x[i])
                .map_or(BLANK, |j| x[j + 1])
        })
        .collect()
}

#[test]
fn keep_nth_targets() {
    let cfg = TaskConfig::keep_nth(5, 20, 7, 1);
    for inst in dataset(&cfg, Split::Train, 50).unwrap() {
        assert_eq!(inst.input.len(), 20);
        assert!(inst.input.iter().all(|&x| (1..=7).contains(&x)));
        for t in 0..20 {
            assert_eq!(inst.mask[t], t >= 4);
            if inst.mask[t] {
                assert_eq!(inst.target[t], inst.input[4]);
            }
        }
    }
}

#[test]
fn mqar_structure() {
    let (kappa, vocab) = (4, 9);
    let cfg = TaskConfig::mqar(kappa, 30, vocab, 2);
    for inst in dataset(&cfg, Split::Val, 100).unwrap() {
        let x = &inst.input;
        let mut keys: Vec<usize> = x[..2 * kappa].iter().step_by(2).copied().collect();
        for p in x[..2 * kappa].chunks(2) {
            assert!((1..=kappa).contains(&p[0]));
            assert!((kappa + 1..=kappa + vocab).contains(&p[1]));
        }
        keys.sort_unstable();
        assert_eq!(keys, (1..=kappa).collect::<Vec<_>>());
        let mut queried = vec![];
        for t in 2 * kappa..x.len() {
            if x[t] <= kappa {
                assert!(inst.mask[t]);
                let j = (0..kappa).find(|&i| x[2 * i] == x[t]).unwrap();
                assert_eq!(inst.target[t], x[2 * j + 1]);
                queried.push(x[t]);
            } else {
                assert!(!inst.mask[t]);
            }
        }
        queried.sort_unstable();
        assert_eq!(
            queried,
            (1..=kappa).collect::<Vec<_>>(),
            "each key queried once"
        );
        assert!(inst.mask[..2 * kappa].iter().all(|&m| !m));
    }
}

#[test]
fn mqar_tight_suffix() {
    let cfg = TaskConfig::mqar(4, 16, 3, 0);
    for inst in dataset(&cfg, Split::Test, 20).unwrap() {
        assert_eq!(inst.mask.iter().filter(|&&m| m).count(), 4);
    }
    assert!(TaskConfig::mqar(5, 16, 3, 0).validate().is_err());
}

#[test]
fn induction_targets_match_brute_force() {
    let cfg = TaskConfig::induction_heads(40, 5, 0.5, 0.1, 3);
    for inst in dataset(&cfg, Split::Train, 200).unwrap() {
        let o = induction_oracle(&inst.input);
        assert_eq!(inst.target, o);
        assert!(!inst.mask[0] && inst.mask[1..].iter().all(|&m| m));
    }
}

#[test]
fn induction_hard_setting_plants_mirrored_special() {
    let (t, v) = (100, 10);
    let cfg = TaskConfig::induction_heads(t, v, 1.0, 0.1, 4);
    for inst in dataset(&cfg, Split::Test, 100).unwrap() {
        let x = &inst.input;
        // exactly one token appears exactly twice at 1-based positions r and T-r with r <= 10
        let twice: Vec<usize> = (1..=v)
            .filter(|&s| {
                let pos: Vec<usize> = (0..t).filter(|&i| x[i] == s).map(|i| i + 1).collect();
                pos.len() == 2 && pos[0] <= 10 && pos[0] + pos[1] == t
            })
            .collect();
        assert_eq!(twice.len(), 1, "{x:?}");
    }
}

#[test]
fn splits_are_disjoint_and_seeded() {
    let cfg = TaskConfig::keep_nth(3, 30, 50, 9);
    let a = dataset(&cfg, Split::Train, 20).unwrap();
    let b = dataset(&cfg, Split::Test, 20).unwrap();
    assert_eq!(a, dataset(&cfg, Split::Train, 20).unwrap());
    for x in &a {
        assert!(b.iter().all(|y| y.input != x.input));
    }
    let other = dataset(&TaskConfig { seed: 10, ..cfg }, Split::Train, 20).unwrap();
    assert_ne!(a, other);
}

#[test]
fn ndjson_roundtrip_and_oracle() {
    let cfg = TaskConfig::mqar(2, 12, 4, 5);
    let data = dataset(&cfg, Split::Train, 10).unwrap();
    let mut buf = vec![];
    write_ndjson(&mut buf, &data).unwrap();
    assert_eq!(buf.iter().filter(|&&c| c == b'\n').count(), 10);
    let back = read_ndjson(&buf[..]).unwrap();
    assert_eq!(back, data);
    assert!(back.iter().all(|i| oracle_agrees(i).unwrap()));
    let mut bad = back[0].clone();
    bad.meta.generator = "nope".into();
    assert!(oracle_answer(&bad).is_err());
}

#[test]
fn invalid_configs() {
    assert!(TaskConfig::keep_nth(0, 5, 3, 0).validate().is_err());
    assert!(TaskConfig::keep_nth(6, 5, 3, 0).validate().is_err());
    assert!(TaskConfig::induction_heads(10, 5, 0.0, 0.1, 0)
        .validate()
        .is_err());
    assert!(TaskConfig::induction_heads(100, 5, 0.5, 0.0, 0)
        .validate()
        .is_err());
    assert!(gen_mqar(&TaskConfig::keep_nth(1, 5, 3, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn induction_oracle_property(seed in any::<u64>(), v in 2usize..8, p in 0.0f64..1.0) {
        let cfg = TaskConfig::induction_heads(4 * v + 20, v, p, 0.1, seed);
        let inst = generate(&cfg).unwrap();
        prop_assert_eq!(&inst.target, &induction_oracle(&inst.input));
        prop_assert!(inst.input.iter().all(|&x| (1..=v).contains(&x)));
    }

    #[test]
    fn keep_nth_mask_count(seed in any::<u64>(), t in 1usize..40, n in 1usize..40) {
        prop_assume!(n <= t);
        let inst = generate(&TaskConfig::keep_nth(n, t, 5, seed)).unwrap();
        prop_assert_eq!(inst.mask.iter().filter(|&&m| m).count(), t - n + 1);
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let cfg = TaskConfig::mqar(3, 20, 6, seed);
        prop_assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }
}
