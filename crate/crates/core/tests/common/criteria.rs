//! One check per acceptance criterion. Each returns a short summary on success
//! and the first violation otherwise.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use crocodile::ablation::{run_ablation, AblationInputs, Arm};
use crocodile::config::{Preset, RunConfig};
use crocodile::data::{epoch_batches, generate_synthetic, Role, SyntheticSpec};
use crocodile::eval::{auc, average_precision, drop, Comparison};
use crocodile::intervention::{intervene, to_host, InterventionConfig};
use crocodile::losses::kl_uniform;
use crocodile::model::{Architecture, Branch, EmbeddingKind, FeatureEmbedding, DOMAIN_PREFIX};
use crocodile::prior::{causality_map, normalize_embeddings, CausalityMap, Signal, EPS};
use crocodile::relational::{ground_truth, rs_loss, rs_loss_tensor, PairingKind, RelationalScore};
use crocodile::train::{Ablation, TrainConfig};
use rand::Rng;

use super::{gradcheck, rng, scalar, tensor, tiny_data, tiny_model, tiny_spec, uniform_vec};

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn reference_means() -> Comparison {
    serde_json::from_str(&fixture("reference_means.json")).expect("valid comparison fixture")
}

/// Printed drops as `(model, auc, ap)`.
pub fn reference_drops() -> Vec<(String, f64, f64)> {
    let v: serde_json::Value = serde_json::from_str(&fixture("reference_drops.json")).unwrap();
    v["drops"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| {
            (
                d["model"].as_str().unwrap().to_string(),
                d["auc"].as_f64().unwrap(),
                d["ap"].as_f64().unwrap(),
            )
        })
        .collect()
}

pub fn drop_formula() -> Outcome {
    let table = reference_means();
    let reference = reference_drops();
    ensure(table.columns.len() == 5 && reference.len() == 5, || "fixture must hold 5 models".into())?;
    let mut worst = 0.0f64;
    for (col, (model, auc_drop, ap_drop)) in table.columns.iter().zip(&reference) {
        ensure(&col.model == model, || format!("column order: {} vs {model}", col.model))?;
        let ood = col.ood.as_ref().ok_or("fixture column without OOD means")?;
        let got = [
            (drop(col.id.mean_auc, ood.mean_auc).map_err(|e| e.to_string())?, *auc_drop),
            (drop(col.id.mean_ap, ood.mean_ap).map_err(|e| e.to_string())?, *ap_drop),
        ];
        for (value, want) in got {
            let err = (value - want).abs();
            worst = worst.max(err);
            ensure(err <= 0.01 + 1e-9, || format!("{model}: drop {value:.4} vs reference {want}"))?;
        }
    }
    Ok(format!("10/10 drops within 0.01 (max deviation {worst:.4})"))
}

/// Stock benchmark settings: the desk preset with the given seeds, restricted
/// to the plain backbone and the full model.
pub const BENCHMARK_EPOCHS: usize = 5;

pub fn benchmark_config(seeds: &[u64]) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.ablate.seeds = seeds.to_vec();
    cfg.ablate.arms.retain(|a| a.name == "baseline" || a.name == "full");
    // five epochs keep three seeds of both arms inside the time budget
    cfg.train.max_epochs = BENCHMARK_EPOCHS;
    cfg
}

pub fn benchmark(seeds: &[u64], out_dir: Option<&Path>) -> Outcome {
    let start = std::time::Instant::now();
    let cfg = benchmark_config(seeds);
    let data = cfg.load_data().map_err(|e| e.to_string())?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let inputs = AblationInputs {
        train: &data.train,
        val: &data.val,
        ood: data.ood.as_ref().ok_or("benchmark needs OOD data")?,
        graph: data.graph.as_ref(),
    };
    let outcome =
        run_ablation(&cfg.ablate.arms, &cfg.model, &train_cfg, &inputs, seeds, out_dir).map_err(|e| e.to_string())?;
    if let Some(failed) = outcome.runs.iter().find(|r| r.error.is_some()) {
        return Err(format!("{} seed {}: {}", failed.arm, failed.seed, failed.error.as_ref().unwrap()));
    }
    let drop_of = |arm: &str| {
        outcome
            .median_of(arm)
            .and_then(|r| r.drop_auc_percent)
            .ok_or_else(|| format!("no median drop for `{arm}`"))
    };
    let (base, full) = (drop_of("baseline")?, drop_of("full")?);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let per_seed = |arm: &str| {
        outcome
            .runs
            .iter()
            .filter(|r| r.arm == arm)
            .filter_map(|r| r.report.as_ref()?.drop_auc_percent.map(|d| format!("{d:.2}")))
            .collect::<Vec<_>>()
            .join("/")
    };
    let summary = format!(
        "median AUC drop: full {full:.2}% vs baseline {base:.2}% over seeds {seeds:?} \
         (per seed full {}, baseline {}), {minutes:.1} min",
        per_seed("full"),
        per_seed("baseline")
    );
    ensure(full < base, || format!("full model does not shrink the drop: {summary}"))?;
    ensure(minutes < 30.0, || format!("over the 30 minute budget: {summary}"))?;
    Ok(summary)
}

pub fn gradient_suite() -> Outcome {
    for (name, check) in gradcheck::TERMS {
        check().map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!("{} term families, 20 trials each, rel err < 1e-4", gradcheck::TERMS.len()))
}

fn causal(values: Vec<f64>, shape: &[usize]) -> FeatureEmbedding {
    FeatureEmbedding::new(tensor(values, shape), Branch::Disease, EmbeddingKind::Causal).unwrap()
}

/// Scalar double loop over the normalized embedding.
pub fn loop_maps(q: &[f64], b: usize, n: usize, h: usize) -> Vec<Vec<Vec<f64>>> {
    let max = q.iter().fold(0.0f64, |m, &v| m.max(v.max(0.0)));
    let at = |s: usize, i: usize, k: usize| q[(s * n + i) * h + k].max(0.0) / (max + EPS);
    let peak = |s: usize, i: usize| (0..h).map(|k| at(s, i, k)).fold(f64::MIN, f64::max);
    let mass = |s: usize, i: usize| (0..h).map(|k| at(s, i, k)).sum::<f64>();
    (0..b)
        .map(|s| {
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            if mass(s, j) <= EPS {
                                0.0
                            } else {
                                peak(s, i) * peak(s, j) / (mass(s, j) + EPS)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn causality_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut r = rng(30_000 + seed);
        let (b, n, h) = (r.random_range(1..4), r.random_range(2..9), r.random_range(1..17));
        let mut q = uniform_vec(&mut r, b * n * h, -1.0, 2.0);
        if seed % 10 == 0 {
            // an all-negative row exercises the zero-column convention
            q[..h].fill(-1.0);
        }
        let maps = causality_map(&normalize_embeddings(&causal(q.clone(), &[b, n, h])).unwrap()).unwrap();
        let got = maps.to_vec3::<f64>().unwrap();
        let want = loop_maps(&q, b, n, h);
        for s in 0..b {
            for i in 0..n {
                for j in 0..n {
                    let err = (got[s][i][j] - want[s][i][j]).abs();
                    worst = worst.max(err);
                    ensure(err < 1e-9, || format!("input {seed} entry ({s},{i},{j}): error {err:e}"))?;
                    ensure(got[s][i][j] <= 1.0 + 1e-6, || format!("input {seed}: entry above 1"))?;
                }
            }
        }
    }
    let q = causal(vec![0.5, 1.0, 0.2, 0.4], &[1, 2, 2]);
    let map = causality_map(&normalize_embeddings(&q).unwrap()).unwrap();
    let map = CausalityMap::from_tensor(&map.squeeze(0).unwrap()).unwrap();
    let (fwd, bwd) = (map.values[0][1], map.values[1][0]);
    ensure((fwd - 0.6667).abs() < 1e-4 && (bwd - 0.2667).abs() < 1e-4, || {
        format!("worked example gave {fwd:.4}/{bwd:.4}")
    })?;
    ensure(map.signal(0, 1, 1e-9) == Signal::Forward, || "worked example: no i→j signal".into())?;
    Ok(format!("100 inputs, max error {worst:.1e}; worked example {fwd:.4}/{bwd:.4}, i→j"))
}

pub fn embedding_pair(b: usize, n: usize, h: usize, seed: u64) -> (FeatureEmbedding, FeatureEmbedding) {
    let mut r = rng(seed);
    // eighths keep every sum and difference exact
    let mut draw = || (0..b * n * h).map(|_| f64::from(r.random_range(-16i32..16)) / 8.0).collect::<Vec<_>>();
    let ca = causal(draw(), &[b, n, h]);
    let sp = FeatureEmbedding::new(tensor(draw(), &[b, n, h]), Branch::Disease, EmbeddingKind::Spurious).unwrap();
    (ca, sp)
}

/// Per-draw intervention seeds for Monte Carlo checks.
pub fn draw_seeds(n: usize) -> Vec<u64> {
    let mut r = rng(0x1d5e);
    (0..n).map(|_| r.random()).collect()
}

fn icfg(drop_prob: f64, rng_seed: u64) -> InterventionConfig {
    InterventionConfig { drop_prob, rng_seed }
}

pub fn intervention_contracts() -> Outcome {
    for seed in 0..20 {
        let (ca, sp) = embedding_pair(5, 3, 4, seed);
        let bd = intervene(&ca, &sp, &icfg(1.0, seed)).map_err(|e| e.to_string())?;
        ensure(to_host(&bd).unwrap() == to_host(&ca).unwrap(), || "drop_prob 1 changed Q^ca".into())?;

        let (ca, sp) = embedding_pair(6, 2, 3, 100 + seed);
        let bd = to_host(&intervene(&ca, &sp, &icfg(0.0, seed)).unwrap()).unwrap();
        let ca = to_host(&ca).unwrap();
        let mut diffs: Vec<Vec<Vec<f64>>> = bd
            .iter()
            .zip(&ca)
            .map(|(x, c)| {
                x.iter()
                    .zip(c)
                    .map(|(xr, cr)| xr.iter().zip(cr).map(|(a, b)| a - b).collect())
                    .collect()
            })
            .collect();
        let mut rows = to_host(&sp).unwrap();
        let key = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| a.partial_cmp(b).unwrap();
        diffs.sort_by(key);
        rows.sort_by(key);
        ensure(diffs == rows, || format!("drop_prob 0, seed {seed}: differences are not Q^sp's rows"))?;
    }

    const DRAWS: u64 = 10_000;
    let (b, h) = (4, 2);
    let (ca, sp) = embedding_pair(b, 1, h, 7);
    let (ca_h, sp_h) = (to_host(&ca).unwrap(), to_host(&sp).unwrap());
    let mut sum = vec![0.0; b * h];
    let mut sq = vec![0.0; b * h];
    for t in draw_seeds(DRAWS as usize) {
        let bd = to_host(&intervene(&ca, &sp, &icfg(0.3, t)).unwrap()).unwrap();
        for i in 0..b {
            for k in 0..h {
                let d = bd[i][0][k] - ca_h[i][0][k];
                sum[i * h + k] += d;
                sq[i * h + k] += d * d;
            }
        }
    }
    let mut worst_z = 0.0f64;
    for i in 0..b {
        for k in 0..h {
            let expected = 0.7 * (0..b).map(|j| sp_h[j][0][k]).sum::<f64>() / b as f64;
            let mean = sum[i * h + k] / DRAWS as f64;
            let sigma = ((sq[i * h + k] / DRAWS as f64 - mean * mean) / DRAWS as f64).sqrt();
            let z = (mean - expected).abs() / sigma;
            worst_z = worst_z.max(z);
            ensure(z <= 3.0, || format!("sample {i} dim {k}: mean {mean:.4} vs {expected:.4} ({z:.2}σ)"))?;
        }
    }
    Ok(format!("identity at p=1, permutation at p=0, Monte Carlo within {worst_z:.2}σ"))
}

pub fn relational_wiring() -> Outcome {
    for kind in PairingKind::ALL {
        let mixed = matches!(kind, PairingKind::CausalSpurious | PairingKind::SpuriousCausal);
        ensure(ground_truth(kind) == u8::from(mixed), || format!("ground truth of {kind}"))?;
    }
    let half: Vec<RelationalScore> = PairingKind::ALL
        .iter()
        .map(|&kind| RelationalScore { value: 0.5, kind })
        .collect();
    let host = rs_loss(&half).map_err(|e| e.to_string())?;
    let dev = scalar(&rs_loss_tensor(&tensor(vec![0.5; 12], &[3, 4])).unwrap());
    ensure(host == 0.25 && dev == 0.25, || format!("rs_loss at 0.5 gave {host}/{dev}"))?;
    gradcheck::relational_score_loss()?;
    Ok("ground truths, rs_loss(0.5) = 0.25, finite-difference gradient".into())
}

pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                credit += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}

/// Mean over positives of the precision among everything scored at least as high.
pub fn ranking_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1).collect();
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            let hits = above.iter().filter(|&&j| labels[j] == 1).count();
            hits as f64 / above.len() as f64
        })
        .sum();
    total / positives.len() as f64
}

/// Random scores with both labels present; a third of the instances draw
/// scores from a coarse grid to force ties.
pub fn metric_instance(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut r = rng(seed);
    let n = r.random_range(2..60);
    let grid = r.random_range(0..3) == 0;
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.3))).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = (0..n)
        .map(|_| {
            if grid {
                f64::from(r.random_range(0..5u8)) / 4.0
            } else {
                r.random::<f64>()
            }
        })
        .collect();
    (scores, labels)
}

pub fn metric_oracles() -> Outcome {
    let (mut worst_auc, mut worst_ap) = (0.0f64, 0.0f64);
    for seed in 0..1000 {
        let (s, y) = metric_instance(seed);
        let a = auc(&s, &y).map_err(|e| e.to_string())?;
        let p = average_precision(&s, &y).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((a - pairwise_auc(&s, &y)).abs());
        worst_ap = worst_ap.max((p - ranking_ap(&s, &y)).abs());
        ensure(worst_auc < 1e-9 && worst_ap < 1e-9, || format!("instance {seed}: {a} / {p}"))?;

        let grid: Vec<f64> = s.iter().map(|v| (v * 64.0).round() / 16.0 - 2.0).collect();
        let cubic: Vec<f64> = grid.iter().map(|x| x * x * x + 7.0 * x).collect();
        let base = auc(&grid, &y).unwrap();
        ensure(base == auc(&cubic, &y).unwrap(), || format!("instance {seed}: x³+7x changed the AUC"))?;
    }
    Ok(format!("1000 instances, max error AUC {worst_auc:.1e}, AP {worst_ap:.1e}; monotone invariance exact"))
}

/// Audits batches of the stock generator at batch size `batch_size` over
/// `epochs` epochs. Returns the number of audited batches.
pub fn sampler_audit(n: usize, batch_size: usize, epochs: u64) -> Result<usize, String> {
    let ds = generate_synthetic(&SyntheticSpec::default(), n, Role::Id).map_err(|e| e.to_string())?;
    let prevalence = ds.prevalence();
    let mut audited = 0;
    for epoch in 0..epochs {
        let batches = epoch_batches(&ds, batch_size, 17, epoch).map_err(|e| e.to_string())?;
        let again = epoch_batches(&ds, batch_size, 17, epoch).unwrap();
        ensure(batches == again, || format!("epoch {epoch}: batch order not reproducible"))?;
        let mut seen = vec![0usize; n];
        for batch in &batches {
            for &i in batch {
                seen[i] += 1;
            }
            for (c, &p) in prevalence.iter().enumerate() {
                let pos = batch.iter().filter(|&&i| ds.samples[i].disease_labels[c] == 1).count();
                let rate = pos as f64 / batch.len() as f64;
                ensure((rate - p).abs() <= 0.2 * p + 1e-12, || {
                    format!("epoch {epoch}: class {c} rate {rate:.3} vs prevalence {p:.3}")
                })?;
            }
            audited += 1;
        }
        ensure(seen.iter().all(|&k| k == 1), || format!("epoch {epoch} is not a partition"))?;
    }
    Ok(audited)
}

pub fn sampler() -> Outcome {
    let batches = sampler_audit(3200, 64, 4)?;
    ensure(batches >= 200, || format!("only {batches} batches audited"))?;
    Ok(format!("{batches} batches of 64 within ±20% of prevalence, partitions, reproducible"))
}

pub fn kl_term() -> Outcome {
    let zeros = Tensor::zeros((5, 4), DType::F64, &Device::Cpu).unwrap();
    let shifted = tensor(vec![3.0, 3.0, 3.0, -2.0, -2.0, -2.0], &[2, 3]);
    let uniform = [
        scalar(&kl_uniform(&zeros, Branch::Disease).unwrap()),
        scalar(&kl_uniform(&zeros, Branch::Domain).unwrap()),
        scalar(&kl_uniform(&shifted, Branch::Domain).unwrap()),
    ];
    ensure(uniform.iter().all(|v| v.abs() <= 1e-8), || format!("uniform predictions gave {uniform:?}"))?;
    let mut smallest = f64::INFINITY;
    for seed in 0..100 {
        let mut r = rng(50_000 + seed);
        let (b, k) = (r.random_range(1..6), r.random_range(2..6));
        let t = tensor(uniform_vec(&mut r, b * k, -3.0, 3.0), &[b, k]);
        for branch in [Branch::Disease, Branch::Domain] {
            let v = scalar(&kl_uniform(&t, branch).unwrap());
            smallest = smallest.min(v);
            ensure(v > 0.0, || format!("input {seed}: KL {v} for {branch:?}"))?;
        }
    }
    Ok(format!("0 on uniform, > 0 on 100 random inputs (min {smallest:.2e})"))
}

/// Two arms with the same effective mask, plus the domain-branch-free arm, on
/// a small task.
pub fn ablation_determinism() -> Outcome {
    let data = tiny_data(120, 2, true, 21);
    let (train, val) = data.split_by_domain(0.75, 0).map_err(|e| e.to_string())?;
    let ood = generate_synthetic(&tiny_spec(2, true, 21), 40, Role::Ood).map_err(|e| e.to_string())?;
    let graph = tiny_spec(2, true, 21).causal_graph().map_err(|e| e.to_string())?;
    let arms = vec![
        Arm::new("nodb_a", Architecture::Crocodile, &[Ablation::NoDomainBranch, Ablation::NoTp]),
        Arm::new("nodb_b", Architecture::Crocodile, &[Ablation::NoDomainBranch, Ablation::NoTp, Ablation::NoCl]),
        Arm::new("full_a", Architecture::Crocodile, &[]),
        Arm::new("full_b", Architecture::Crocodile, &[]),
    ];
    let cfg = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::desk()
    };
    let inputs = AblationInputs {
        train: &train,
        val: &val,
        ood: &ood,
        graph: Some(&graph),
    };
    let outcome =
        run_ablation(&arms, &tiny_model(3, 2), &cfg, &inputs, &[3], None).map_err(|e| e.to_string())?;
    let history = |name: &str| {
        outcome
            .runs
            .iter()
            .find(|r| r.arm == name)
            .and_then(|r| r.history.clone())
            .ok_or_else(|| format!("arm {name} did not finish"))
    };
    for (a, b) in [("nodb_a", "nodb_b"), ("full_a", "full_b")] {
        ensure(history(a)?.same_trajectory(&history(b)?), || format!("{a} and {b} diverged"))?;
    }
    let nodb = history("nodb_a")?;
    ensure(!nodb.steps.is_empty(), || "no steps recorded".into())?;
    for s in &nodb.steps {
        let g = s.grad_norms.get(DOMAIN_PREFIX).copied().unwrap_or(0.0);
        ensure(g == 0.0, || format!("step {}: domain-branch gradient norm {g}", s.step))?;
    }
    let full = history("full_a")?;
    ensure(full.steps.iter().any(|s| s.grad_norms.get(DOMAIN_PREFIX).copied().unwrap_or(0.0) > 0.0), || {
        "full arm never updates the domain branch".into()
    })?;
    Ok(format!(
        "identical histories for equal masks; zero domain-branch gradient over {} steps",
        nodb.steps.len()
    ))
}
