use std::collections::BTreeSet;

use perpeft::nn::Module;
use perpeft::recsys::{
    bce_loss, loss_global, loss_personalized, loss_value, ndcg_gain, rank_of, score_all, top_k,
    LossMode, Metrics, Sasrec, SasrecConfig,
};
use perpeft::Error;
use perpeft_autodiff::check::check_gradients;
use perpeft_autodiff::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ln_sigmoid(x: f64) -> f64 {
    -(1.0 + (-x).exp()).ln()
}

#[test]
fn literal_loss_examples() {
    let zero = vec![vec![0.0, 0.0]];
    assert_eq!(
        loss_global(&zero, &zero, &zero, LossMode::Literal).unwrap(),
        0.0
    );
    // pred·pos = ln 3, pred·neg = −ln 3
    let l3 = 3f64.ln();
    let got = loss_global(&[vec![l3]], &[vec![-l3]], &[vec![1.0]], LossMode::Literal).unwrap();
    assert!((got - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    assert!((got + 1.0986).abs() < 1e-4);
}

#[test]
fn standard_loss_examples() {
    let zero = vec![vec![0.0; 3]];
    let got = loss_global(&zero, &zero, &zero, LossMode::StandardBce).unwrap();
    assert!((got - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((got - 1.3863).abs() < 1e-4);
}

#[test]
fn two_item_case_matches_scalar_arithmetic() {
    let pred = vec![vec![0.5, -1.0], vec![2.0, 0.25]];
    let pos = vec![vec![1.0, 0.5], vec![-0.5, 1.0]];
    let neg = vec![vec![0.25, 0.25], vec![1.0, -2.0]];
    let s = |a: &[f64], b: &[f64]| a[0] * b[0] + a[1] * b[1];
    let (p0, p1) = (s(&pred[0], &pos[0]), s(&pred[1], &pos[1]));
    let (n0, n1) = (s(&pred[0], &neg[0]), s(&pred[1], &neg[1]));
    let literal = ln_sigmoid(n0) + ln_sigmoid(n1) - ln_sigmoid(p0) - ln_sigmoid(p1);
    let standard = -ln_sigmoid(p0) - ln_sigmoid(-n0) - ln_sigmoid(p1) - ln_sigmoid(-n1);
    assert!((loss_global(&pos, &neg, &pred, LossMode::Literal).unwrap() - literal).abs() < 1e-9);
    assert!(
        (loss_global(&pos, &neg, &pred, LossMode::StandardBce).unwrap() - standard).abs() < 1e-9
    );
    let pool: BTreeSet<usize> = [3, 7].into();
    let personal = loss_personalized(&pos, &neg, &pred, &[3, 7], &pool, LossMode::Literal).unwrap();
    assert!((personal - literal).abs() < 1e-9);
}

#[test]
fn loss_errors() {
    let one = vec![vec![1.0]];
    let two = vec![vec![1.0], vec![2.0]];
    assert!(matches!(
        loss_global(&one, &two, &one, LossMode::Literal),
        Err(Error::Contract(_))
    ));
    let pool: BTreeSet<usize> = [0, 1].into();
    assert!(matches!(
        loss_personalized(&one, &one, &one, &[5], &pool, LossMode::Literal),
        Err(Error::Sampling(_))
    ));
}

#[test]
fn single_group_loss_equals_global_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rows = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    };
    let (pos, neg, pred) = (rows(9), rows(9), rows(9));
    let all: BTreeSet<usize> = (0..20).collect();
    let draws: Vec<usize> = (0..9).map(|i| (i * 7) % 20).collect();
    for mode in [LossMode::Literal, LossMode::StandardBce] {
        let a = loss_global(&pos, &neg, &pred, mode).unwrap();
        let b = loss_personalized(&pos, &neg, &pred, &draws, &all, mode).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for mode in [LossMode::Literal, LossMode::StandardBce] {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = (0..3)
                .map(|_| {
                    Tensor::new(
                        vec![4, 3],
                        (0..12).map(|_| rng.random_range(-1.5..1.5)).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let report = check_gradients(&inputs, 1e-5, |g, v| {
                Ok(bce_loss(g, v[0], v[1], v[2], mode).unwrap())
            })
            .unwrap();
            for r in report {
                assert!(
                    r.rel_error <= 1e-4,
                    "{mode} seed {seed} {}: {}",
                    r.name,
                    r.rel_error
                );
            }
            let scores = |a: &Tensor, b: &Tensor| -> Vec<f64> {
                (0..4)
                    .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum())
                    .collect()
            };
            let direct = loss_value(
                &scores(&inputs[0], &inputs[1]),
                &scores(&inputs[0], &inputs[2]),
                mode,
            );
            let mut g = Graph::new();
            let v: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let l = bce_loss(&mut g, v[0], v[1], v[2], mode).unwrap();
            assert!((g.value(l).item() - direct).abs() < 1e-12);
        }
    }
}

#[test]
fn score_order_and_ties() {
    let items = Tensor::from_rows(&[vec![2.0], vec![5.0], vec![1.0]]);
    let order: Vec<usize> = score_all(&[1.0], &items, &[])
        .into_iter()
        .map(|(j, _)| j)
        .collect();
    assert_eq!(order, [1, 0, 2]);
    let flat = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]);
    let order: Vec<usize> = score_all(&[1.0], &flat, &[])
        .into_iter()
        .map(|(j, _)| j)
        .collect();
    assert_eq!(order, [0, 1, 2]);
    assert_eq!(rank_of(2, &[1.0], &flat, &[]), 3);
    assert_eq!(rank_of(2, &[1.0], &flat, &[true, false, true]), 2);
}

#[test]
fn ndcg_gain_examples() {
    assert_eq!(ndcg_gain(1, 10), 1.0);
    assert_eq!(ndcg_gain(11, 10), 0.0);
    assert!((ndcg_gain(3, 10) - 0.5).abs() < 1e-15);
}

#[test]
fn four_user_case_matches_hand_enumeration() {
    let items = Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0, 1.0],
        vec![2.0, 0.0],
        vec![0.0, 2.0],
        vec![-1.0, 1.0],
    ]);
    // (user vector, target, excluded items)
    let cases: [(&[f64], usize, &[usize]); 4] = [
        (&[1.0, 0.0], 2, &[3]),
        (&[0.0, 1.0], 5, &[4]),
        (&[1.0, 1.0], 0, &[2]),
        (&[-1.0, 0.0], 3, &[]),
    ];
    // u0: i2 ties i0 (lower id) → 2. u1: i5 ties i1, i2 → 3.
    // u2: i3, i4 score 2 > 1 → 3. u3: every other item scores higher → 6.
    let hand = [2, 3, 3, 6];
    let mut ranks = Vec::new();
    for ((u, target, ex), want) in cases.iter().zip(hand) {
        let mut mask = vec![false; 6];
        ex.iter().for_each(|&j| mask[j] = true);
        let r = rank_of(*target, u, &items, &mask);
        assert_eq!(r, want);
        let pos = score_all(u, &items, &mask)
            .iter()
            .position(|(j, _)| j == target)
            .unwrap();
        assert_eq!(pos + 1, r);
        ranks.push(r);
    }
    let m = Metrics::from_ranks(ranks, &[1, 2, 5]);
    assert_eq!(m.n_users, 4);
    assert_eq!(m.hit_at(1), 0.0);
    assert_eq!(m.hit_at(2), 0.25);
    assert_eq!(m.hit_at(5), 0.75);
    assert_eq!(m.ndcg_at(1), 0.0);
    assert!((m.ndcg_at(2) - 0.25 / 3f64.log2()).abs() <= 1e-15);
    assert!((m.ndcg_at(5) - 0.25 * (1.0 / 3f64.log2() + 0.5 + 0.5)).abs() <= 1e-15);
}

#[test]
fn metrics_json_shape() {
    let m = Metrics::from_ranks(vec![1, 40], &[20, 30]);
    let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    assert_eq!(v["hit"]["20"], 0.5);
    assert_eq!(v["n_users"], 2);
    assert!(v["ndcg"]["30"].is_number());
    let back: Metrics = serde_json::from_str(&m.to_json()).unwrap();
    assert_eq!(back.hit, m.hit);
}

fn embeddings() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<bool>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(-3i32..=3, 3)
                .prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(prop::collection::vec((-3i32..=3).prop_map(f64::from), 3), n),
            prop::collection::vec(prop::bool::weighted(0.2), n),
        )
    })
}

proptest! {
    #[test]
    fn top_k_is_full_sort_prefix((u, rows, ex) in embeddings(), k in 0usize..35) {
        let items = Tensor::from_rows(&rows);
        let mut full: Vec<(usize, f64)> = (0..rows.len())
            .filter(|&j| !ex[j])
            .map(|j| (j, u.iter().zip(&rows[j]).map(|(a, b)| a * b).sum()))
            .collect();
        full.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let want: Vec<usize> = full.iter().take(k).map(|(j, _)| *j).collect();
        prop_assert_eq!(top_k(&u, &items, &ex, k), want);
    }

    #[test]
    fn metric_bounds_and_monotonicity(ranks in prop::collection::vec(1usize..60, 1..40)) {
        let ks = [1, 5, 10, 20, 30, 50];
        let m = Metrics::from_ranks(ranks, &ks);
        for w in ks.windows(2) {
            prop_assert!(m.hit_at(w[0]) <= m.hit_at(w[1]));
            prop_assert!(m.ndcg_at(w[0]) <= m.ndcg_at(w[1]));
        }
        for k in ks {
            prop_assert!(0.0 <= m.ndcg_at(k) && m.ndcg_at(k) <= m.hit_at(k) && m.hit_at(k) <= 1.0);
        }
    }

    #[test]
    fn positive_scaling_keeps_ranks((u, rows, ex) in embeddings(), e in -8i32..8) {
        // powers of two scale exactly, so ties survive
        let c = 2f64.powi(e);
        let items = Tensor::from_rows(&rows);
        let scaled = items.map(|v| v * c);
        for t in 0..rows.len() {
            prop_assert_eq!(rank_of(t, &u, &items, &ex), rank_of(t, &u, &scaled, &ex));
        }
    }
}

fn sasrec() -> Sasrec {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Sasrec::new(
        &SasrecConfig {
            dim: 8,
            n_heads: 2,
            ..SasrecConfig::default()
        },
        &mut rng,
    )
    .unwrap()
}

#[test]
fn sasrec_is_causal() {
    let s = sasrec();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base: Vec<f64> = (0..6 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    for p in 0..5 {
        let mut changed = base.clone();
        for v in &mut changed[(p + 1) * 8..(p + 2) * 8] {
            *v += 0.7;
        }
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![6, 8], data).unwrap());
            let out = s.forward(&mut g, x, &[6], 6, None).unwrap();
            g.value(out).data().to_vec()
        };
        let (a, b) = (run(base.clone()), run(changed));
        assert_eq!(a[..(p + 1) * 8], b[..(p + 1) * 8]);
        assert_ne!(a[(p + 1) * 8..], b[(p + 1) * 8..]);
    }
}

#[test]
fn sasrec_lengths() {
    let s = sasrec();
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 8]));
    let out = s.forward(&mut g, x, &[1], 1, None).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 8]);
    let long = g.constant(Tensor::ones(&[11, 8]));
    assert!(matches!(
        s.forward(&mut g, long, &[11], 11, None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn sasrec_padding_is_inert() {
    let s = sasrec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..2 * 5 * 8)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut other = data.clone();
    // second sequence has length 3; rewrite its padding rows
    for v in &mut other[(5 + 3) * 8..] {
        *v = 9.0;
    }
    let run = |d: Vec<f64>| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![10, 8], d).unwrap());
        let out = s.forward(&mut g, x, &[5, 3], 5, None).unwrap();
        g.value(out).data().to_vec()
    };
    let (a, b) = (run(data), run(other));
    assert_eq!(a[..8 * 8], b[..8 * 8]);
}

#[test]
fn sasrec_gradients_match_finite_differences() {
    let s = sasrec();
    let mut names: Vec<String> = s.params().iter().map(|p| p.name().to_string()).collect();
    names.sort();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(
            vec![8, 8],
            (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![8, 8],
            (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let report = check_gradients(&[x], 1e-5, |g, v| {
            let out = s.forward(g, v[0], &[4, 2], 4, None).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(
            report[0].rel_error <= 1e-4,
            "seed {seed}: {}",
            report[0].rel_error
        );
    }
    assert!(!names.is_empty());
}
