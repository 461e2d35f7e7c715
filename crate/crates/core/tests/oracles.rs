//! Vectorized routines against independent scalar oracles.

mod common;

use candle_core::{Tensor, Var};
use common::criteria::{loop_maps, metric_instance, pairwise_auc, ranking_ap};
use common::{host, rng, scalar, tensor, uniform_vec};
use crocodile::eval::{auc, average_precision, drop};
use crocodile::losses::kl_uniform;
use crocodile::model::{Branch, EmbeddingKind, FeatureEmbedding};
use crocodile::prior::{causality_map, normalize_embeddings, CausalityMap, Signal};
use crocodile::relational::{ground_truth, rs_loss, rs_loss_tensor, PairingKind, RelationalScore};
use crocodile::Error;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn auc_matches_pairwise_oracle() {
    for seed in 0..1000 {
        let (s, y) = metric_instance(seed);
        let got = auc(&s, &y).unwrap();
        assert!((got - pairwise_auc(&s, &y)).abs() < 1e-9, "seed {seed}");
    }
}

#[test]
fn ap_matches_ranking_oracle() {
    for seed in 0..1000 {
        let (s, y) = metric_instance(10_000 + seed);
        let got = average_precision(&s, &y).unwrap();
        assert!((got - ranking_ap(&s, &y)).abs() < 1e-9, "seed {seed}");
    }
}

#[test]
fn auc_is_exactly_invariant_under_monotone_maps() {
    for seed in 0..1000 {
        let (s, y) = metric_instance(20_000 + seed);
        let grid: Vec<f64> = s.iter().map(|v| (v * 64.0).round() / 16.0 - 2.0).collect();
        let cubic: Vec<f64> = grid.iter().map(|x| x * x * x + 7.0 * x).collect();
        let shifted: Vec<f64> = grid.iter().map(|x| 3.0 * x + 11.0).collect();
        let base = auc(&grid, &y).unwrap();
        assert_eq!(base, auc(&cubic, &y).unwrap());
        assert_eq!(base, auc(&shifted, &y).unwrap());
    }
}

#[test]
fn metric_examples() {
    assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(auc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
    assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    assert!((average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!(matches!(average_precision(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
    assert!((drop(83.94, 76.09).unwrap() - 9.3519).abs() < 1e-4);
    assert!(drop(0.0, 0.5).is_err());
}

proptest! {
    #[test]
    fn auc_bounds_and_reversal(seed in 0u64..5000) {
        let (s, y) = metric_instance(seed);
        let a = auc(&s, &y).unwrap();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + auc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
        let ap = average_precision(&s, &y).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }
}

fn causal(values: Vec<f64>, shape: &[usize]) -> FeatureEmbedding {
    FeatureEmbedding::new(tensor(values, shape), Branch::Disease, EmbeddingKind::Causal).unwrap()
}

#[test]
fn causality_map_matches_double_loop() {
    for seed in 0..100 {
        let mut r = rng(30_000 + seed);
        let (b, n, h) = (r.random_range(1..4), r.random_range(2..9), r.random_range(1..17));
        let mut q = uniform_vec(&mut r, b * n * h, -1.0, 2.0);
        if seed % 10 == 0 {
            // an all-negative row exercises the zero-column convention
            for v in &mut q[..h] {
                *v = -1.0;
            }
        }
        let maps = causality_map(&normalize_embeddings(&causal(q.clone(), &[b, n, h])).unwrap()).unwrap();
        let got = maps.to_vec3::<f64>().unwrap();
        let want = loop_maps(&q, b, n, h);
        for s in 0..b {
            for i in 0..n {
                for j in 0..n {
                    assert!((got[s][i][j] - want[s][i][j]).abs() < 1e-9, "seed {seed} ({s},{i},{j})");
                    assert!(got[s][i][j] <= 1.0 + 1e-6);
                }
            }
        }
    }
}

#[test]
fn causality_map_worked_example() {
    let q = causal(vec![0.5, 1.0, 0.2, 0.4], &[1, 2, 2]);
    let normed = normalize_embeddings(&q).unwrap();
    let map = CausalityMap::from_tensor(&causality_map(&normed).unwrap().squeeze(0).unwrap()).unwrap();
    assert!((map.values[0][1] - 0.6667).abs() < 1e-4);
    assert!((map.values[1][0] - 0.2667).abs() < 1e-4);
    assert_eq!(map.signal(0, 1, 1e-9), Signal::Forward);
    assert_eq!(map.signal(1, 0, 1e-9), Signal::Backward);
}

#[test]
fn relational_ground_truth_and_loss() {
    for kind in PairingKind::ALL {
        let mixed = matches!(kind, PairingKind::CausalSpurious | PairingKind::SpuriousCausal);
        assert_eq!(ground_truth(kind), u8::from(mixed), "{kind}");
    }
    let half: Vec<RelationalScore> = PairingKind::ALL
        .iter()
        .map(|&kind| RelationalScore { value: 0.5, kind })
        .collect();
    assert_eq!(rs_loss(&half).unwrap(), 0.25);
    assert_eq!(scalar(&rs_loss_tensor(&tensor(vec![0.5; 12], &[3, 4])).unwrap()), 0.25);
}

#[test]
fn relational_loss_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(40_000 + seed);
        let b = r.random_range(1..6);
        let s = uniform_vec(&mut r, b * 4, 0.0, 1.0);
        let var = Var::from_tensor(&tensor(s.clone(), &[b, 4])).unwrap();
        let grads = rs_loss_tensor(var.as_tensor()).unwrap().backward().unwrap();
        let analytic = host(grads.get(var.as_tensor()).unwrap());
        for i in 0..s.len() {
            let at = |d: f64| {
                let mut v = s.clone();
                v[i] += d;
                scalar(&rs_loss_tensor(&tensor(v, &[b, 4])).unwrap())
            };
            let numeric = (at(1e-5) - at(-1e-5)) / 2e-5;
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-5);
            assert!(rel < 1e-4, "seed {seed} coordinate {i}");
        }
    }
}

#[test]
fn kl_vanishes_on_uniform_predictions() {
    let zeros = Tensor::zeros((5, 4), candle_core::DType::F64, &candle_core::Device::Cpu).unwrap();
    assert!(scalar(&kl_uniform(&zeros, Branch::Disease).unwrap()).abs() < 1e-8);
    assert!(scalar(&kl_uniform(&zeros, Branch::Domain).unwrap()).abs() < 1e-8);
    // a constant shift leaves the softmax uniform
    let shifted = tensor(vec![3.0, 3.0, 3.0, -2.0, -2.0, -2.0], &[2, 3]);
    assert!(scalar(&kl_uniform(&shifted, Branch::Domain).unwrap()).abs() < 1e-8);
}

#[test]
fn kl_is_positive_off_uniform() {
    for seed in 0..100 {
        let mut r = rng(50_000 + seed);
        let (b, k) = (r.random_range(1..6), r.random_range(2..6));
        let mut logits = uniform_vec(&mut r, b * k, -3.0, 3.0);
        // guarantees a non-uniform row even for unlucky draws
        logits[0] += 0.5;
        let t = tensor(logits, &[b, k]);
        assert!(scalar(&kl_uniform(&t, Branch::Disease).unwrap()) > 0.0, "seed {seed}");
        assert!(scalar(&kl_uniform(&t, Branch::Domain).unwrap()) > 0.0, "seed {seed}");
    }
}
