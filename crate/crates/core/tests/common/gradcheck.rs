//! Central finite-difference checks of every loss term at double precision.

use candle_core::{Tensor, Var};
use candle_nn::Linear;
use super::{host, rng, scalar, tensor, uniform_vec};
use crocodile::intervention::{apply_plan, InterventionConfig, InterventionPlan};
use crocodile::losses::{batch_contrastive, ce_disease, ce_domain, kl_uniform, ContrastMode, GroupLabels};
use crocodile::model::{Branch, EmbeddingKind, FeatureEmbedding};
use crocodile::prior::{build_gt_map, causality_map, normalize_embeddings, prior_loss, CausalGraph, GtLevels};
use crocodile::relational::{rs_loss_tensor, RelationalScorer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-5;

/// Compares autograd against central differences for every input coordinate.
fn check<F>(label: &str, inputs: &[(Vec<f64>, Vec<usize>)], f: F) -> Result<(), String>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(v, s)| Var::from_tensor(&tensor(v.clone(), s)).unwrap())
        .collect();
    let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&ts).backward().unwrap();
    for (k, (values, _)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k].as_tensor())
            .map(host)
            .unwrap_or_else(|| vec![0.0; values.len()]);
        for i in 0..values.len() {
            let eval = |delta: f64| {
                let args: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (v, s))| {
                        let mut v = v.clone();
                        if j == k {
                            v[i] += delta;
                        }
                        tensor(v, s)
                    })
                    .collect();
                scalar(&f(&args))
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let denom = analytic[i].abs().max(numeric.abs()).max(FLOOR);
            let rel = (analytic[i] - numeric).abs() / denom;
            if rel >= TOL {
                return Err(format!(
                    "{label}: input {k} coordinate {i}: autograd {} vs numeric {numeric} (rel {rel:e})",
                    analytic[i]
                ));
            }
        }
    }
    Ok(())
}

fn embedding(t: &Tensor, branch: Branch, kind: EmbeddingKind) -> FeatureEmbedding {
    FeatureEmbedding::new(t.clone(), branch, kind).unwrap()
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (r.random_range(2..6), r.random_range(2..5), r.random_range(2..6))
}

fn multi_hot(r: &mut ChaCha8Rng, b: usize, c: usize) -> Vec<Vec<u8>> {
    (0..b).map(|_| (0..c).map(|_| u8::from(r.random_bool(0.5))).collect()).collect()
}

pub fn disease_cross_entropy() -> Result<(), String> {
    for trial in 0..TRIALS {
        let mut r = rng(100 + trial);
        let (b, c, _) = dims(&mut r);
        let labels: Vec<f64> = multi_hot(&mut r, b, c).into_iter().flatten().map(f64::from).collect();
        let labels = tensor(labels, &[b, c]);
        let logits = uniform_vec(&mut r, b * c, -4.0, 4.0);
        check("ce_y", &[(logits, vec![b, c])], |x| ce_disease(&x[0], &labels).unwrap())?;
    }
    Ok(())
}

pub fn domain_cross_entropy() -> Result<(), String> {
    for trial in 0..TRIALS {
        let mut r = rng(200 + trial);
        let (b, k, _) = dims(&mut r);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let logits = uniform_vec(&mut r, b * k, -4.0, 4.0);
        check("ce_d", &[(logits, vec![b, k])], |x| ce_domain(&x[0], &labels).unwrap())?;
    }
    Ok(())
}

pub fn uniform_kl_both_branches() -> Result<(), String> {
    for trial in 0..TRIALS {
        let mut r = rng(300 + trial);
        let (b, k, _) = dims(&mut r);
        let logits = uniform_vec(&mut r, b * k, -3.0, 3.0);
        check("kl_y", &[(logits.clone(), vec![b, k])], |x| kl_uniform(&x[0], Branch::Disease).unwrap())?;
        check("kl_d", &[(logits, vec![b, k])], |x| kl_uniform(&x[0], Branch::Domain).unwrap())?;
    }
    Ok(())
}

/// Intervened features through a fixed per-query linear read, then the task loss.
pub fn backdoor_terms() -> Result<(), String> {
    for trial in 0..TRIALS {
        let mut r = rng(400 + trial);
        let (b, n, h) = dims(&mut r);
        let plan = InterventionPlan::draw(
            b,
            &InterventionConfig {
                drop_prob: 0.3,
                rng_seed: trial,
            },
        )
        .unwrap();
        let head = tensor(uniform_vec(&mut r, n * h, -1.0, 1.0), &[1, n, h]);
        let y: Vec<f64> = multi_hot(&mut r, b, n).into_iter().flatten().map(f64::from).collect();
        let y = tensor(y, &[b, n]);
        let d: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();
        let inputs = [
            (uniform_vec(&mut r, b * n * h, -1.0, 1.0), vec![b, n, h]),
            (uniform_vec(&mut r, b * n * h, -1.0, 1.0), vec![b, n, h]),
        ];
        let logits = |x: &[Tensor], branch| {
            let bd = apply_plan(
                &embedding(&x[0], branch, EmbeddingKind::Causal),
                &embedding(&x[1], branch, EmbeddingKind::Spurious),
                &plan,
            )
            .unwrap();
            bd.values().broadcast_mul(&head).unwrap().sum(2).unwrap()
        };
        check("bd_y", &inputs, |x| ce_disease(&logits(x, Branch::Disease), &y).unwrap())?;
        check("bd_d", &inputs, |x| ce_domain(&logits(x, Branch::Domain), &d).unwrap())?;
    }
    Ok(())
}

pub fn relational_score_loss() -> Result<(), String> {
    for trial in 0..TRIALS {
        let mut r = rng(500 + trial);
        let (b, _, h) = dims(&mut r);
        let (ny, nd) = (r.random_range(2..5), r.random_range(2..4));
        let inputs = [
            (uniform_vec(&mut r, b * ny * h, -1.0, 1.0), vec![b, ny, h]),
            (uniform_vec(&mut r, b * ny * h, -1.0, 1.0), vec![b, ny, h]),
            (uniform_vec(&mut r, b * nd * h, -1.0, 1.0), vec![b, nd, h]),
            (uniform_vec(&mut r, b * nd * h, -1.0, 1.0), vec![b, nd, h]),
            (uniform_vec(&mut r, 2 * h, -1.0, 1.0), vec![1, 2 * h]),
            (uniform_vec(&mut r, 1, -0.5, 0.5), vec![1]),
        ];
        check("rs", &inputs, |x| {
            let scorer = RelationalScorer::from_linear(Linear::new(x[4].clone(), Some(x[5].clone())));
            let scores = scorer
                .score_pairs(
                    &embedding(&x[0], Branch::Disease, EmbeddingKind::Causal),
                    &embedding(&x[1], Branch::Disease, EmbeddingKind::Spurious),
                    &embedding(&x[2], Branch::Domain, EmbeddingKind::Causal),
                    &embedding(&x[3], Branch::Domain, EmbeddingKind::Spurious),
                )
                .unwrap();
            rs_loss_tensor(scores.values()).unwrap()
        })?;
    }
    Ok(())
}

pub fn disease_batch_contrastive() -> Result<(), String> {
    for trial in 0..TRIALS {
        let mut r = rng(600 + trial);
        let (b, c, h) = dims(&mut r);
        let b = b.max(3);
        let y = multi_hot(&mut r, b, c);
        let q = uniform_vec(&mut r, b * c * h, -1.0, 1.0);
        for mode in [ContrastMode::Same, ContrastMode::Diff] {
            let kind = match mode {
                ContrastMode::Same => EmbeddingKind::Causal,
                ContrastMode::Diff => EmbeddingKind::Spurious,
            };
            check(&format!("batch_y_{mode:?}"), &[(q.clone(), vec![b, c, h])], |x| {
                batch_contrastive(&embedding(&x[0], Branch::Disease, kind), GroupLabels::MultiHot(&y), mode).unwrap()
            })?;
        }
    }
    Ok(())
}

pub fn domain_batch_contrastive() -> Result<(), String> {
    for trial in 0..TRIALS {
        let mut r = rng(700 + trial);
        let (b, k, h) = dims(&mut r);
        let b = b.max(3);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let q = uniform_vec(&mut r, b * k * h, -1.0, 1.0);
        for mode in [ContrastMode::Same, ContrastMode::Diff] {
            let kind = match mode {
                ContrastMode::Same => EmbeddingKind::Causal,
                ContrastMode::Diff => EmbeddingKind::Spurious,
            };
            let groups = GroupLabels::Categorical {
                labels: &labels,
                n_groups: k,
            };
            check(&format!("batch_d_{mode:?}"), &[(q.clone(), vec![b, k, h])], |x| {
                batch_contrastive(&embedding(&x[0], Branch::Domain, kind), groups, mode).unwrap()
            })?;
        }
    }
    Ok(())
}

/// Positive, distinct inputs keep the clamp and the maxima away from their kinks.
pub fn task_prior() -> Result<(), String> {
    for trial in 0..TRIALS {
        let mut r = rng(800 + trial);
        let (b, c, h) = dims(&mut r);
        let c = c.max(3);
        let names: Vec<String> = (0..c).map(|i| format!("f{i}")).collect();
        let graph = CausalGraph::new(names, [(0, 1), (0, 2)]).unwrap();
        let gt = build_gt_map(&graph, GtLevels::default()).unwrap();
        let q = uniform_vec(&mut r, b * c * h, 0.05, 1.0);
        check("prior", &[(q, vec![b, c, h])], |x| {
            let q = normalize_embeddings(&embedding(&x[0], Branch::Disease, EmbeddingKind::Causal)).unwrap();
            prior_loss(&causality_map(&q).unwrap(), &gt).unwrap()
        })?;
    }
    Ok(())
}

/// Every term family with its check, in objective order.
pub const TERMS: [(&str, fn() -> Result<(), String>); 8] = [
    ("disease cross-entropy", disease_cross_entropy),
    ("uniform KL", uniform_kl_both_branches),
    ("backdoor cross-entropy", backdoor_terms),
    ("domain cross-entropy", domain_cross_entropy),
    ("relational score", relational_score_loss),
    ("disease batch contrastive", disease_batch_contrastive),
    ("domain batch contrastive", domain_batch_contrastive),
    ("task prior", task_prior),
];
