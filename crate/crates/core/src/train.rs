//! The optimization loop: sampling, forward passes, intervention, loss assembly,
//! Adam steps, per-epoch validation and early stopping.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::intervention::{intervene, InterventionConfig};
use crate::losses::{
    assemble_total, batch_contrastive, ce_disease, ce_domain, kl_uniform, ContrastMode, GroupLabels,
    LossBundle, LossParts, LossTerm, LossWeights,
};
use crate::model::{Branch, Checkpoint, DualBranchModel, Network};
use crate::prior::{build_gt_map, causality_map, normalize_embeddings, prior_loss, CausalGraph, CausalityMap, GtLevels};
use crate::relational::rs_loss_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Drops the relational and batch-contrastive terms (λ7–λ11).
    NoCl,
    /// Drops the task prior (λ12).
    NoTp,
    /// Drops every domain-branch term and contrastive term (λ4–λ11) and never
    /// runs the domain branch.
    NoDomainBranch,
}

impl Ablation {
    pub fn masked_terms(self) -> &'static [LossTerm] {
        use LossTerm::*;
        match self {
            Ablation::NoCl => &[Rs, BatchYSame, BatchYDiff, BatchDSame, BatchDDiff],
            Ablation::NoTp => &[Prior],
            Ablation::NoDomainBranch => &[CeD, KlD, BdD, Rs, BatchYSame, BatchYDiff, BatchDSame, BatchDDiff],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub ablation: BTreeSet<Ablation>,
    pub weights: LossWeights,
    /// Sampler and intervention seed. Run configs set it from their top-level seed.
    #[serde(skip)]
    pub seed: u64,
    /// Validate on the intervened head instead of the causal head.
    pub eval_intervened: bool,
    pub gt_levels: GtLevels,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 12,
            max_epochs: 30,
            patience: 5,
            ablation: BTreeSet::new(),
            weights: LossWeights::default(),
            seed: 0,
            eval_intervened: false,
            gt_levels: GtLevels::default(),
        }
    }

    pub fn full_scale() -> Self {
        Self {
            learning_rate: 1e-6,
            max_epochs: 100,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        self.weights.validate()
    }

    /// Weights with every ablated term set to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        for a in &self.ablation {
            for &t in a.masked_terms() {
                w.set(t, 0.0);
            }
        }
        w
    }

    pub fn uses_domain_branch(&self) -> bool {
        !self.ablation.contains(&Ablation::NoDomainBranch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossBundle,
    /// L2 norm of the gradient over each parameter group; groups without any
    /// gradient report 0.
    pub grad_norms: BTreeMap<String, f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_mean_auc: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl History {
    /// Equality of everything except wall-clock times.
    pub fn same_trajectory(&self, other: &History) -> bool {
        self.best_epoch == other.best_epoch
            && self.steps.len() == other.steps.len()
            && self.epochs.len() == other.epochs.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.step == b.step && a.epoch == b.epoch && a.losses == b.losses && a.grad_norms == b.grad_norms
            })
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch && a.mean_loss == b.mean_loss && a.val_mean_auc == b.val_mean_auc
            })
    }

    pub fn best_val_auc(&self) -> Option<f64> {
        self.best_epoch
            .and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
            .map(|r| r.val_mean_auc)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: History,
}

/// splitmix64 finalizer, used to derive independent per-step seeds.
fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn grad_norms(varmap: &VarMap, grads: &GradStore) -> Result<BTreeMap<String, f64>> {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for (name, var) in crate::model::sorted_vars(varmap) {
        let group = name.split('.').next().unwrap_or(&name).to_string();
        let entry = sq.entry(group).or_insert(0.0);
        if let Some(g) = grads.get(&var) {
            *entry += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect())
}

/// Everything one step needs besides the model.
struct StepInputs<'a> {
    dataset: &'a Dataset,
    batch: &'a [usize],
    weights: &'a LossWeights,
    use_domain: bool,
    gt: Option<&'a CausalityMap>,
    step_seed: u64,
}

/// The twelve loss terms of the two-branch objective on one batch. Terms with
/// zero effective weight are not evaluated and stay 0.
fn crocodile_parts(m: &DualBranchModel, inp: &StepInputs<'_>) -> Result<LossParts> {
    let w = inp.weights;
    let on = |t: LossTerm| w.get(t) > 0.0;
    let dtype = m.varmap().all_vars().first().map(|v| v.dtype()).unwrap_or(candle_core::DType::F32);
    let mut parts = LossParts::zeros(dtype)?;

    let images = inp.dataset.images(inp.batch, dtype)?;
    let y_t = inp.dataset.disease_label_tensor(inp.batch, dtype)?;
    let y = inp.dataset.disease_labels(inp.batch);
    let d = inp.dataset.domain_labels(inp.batch);
    let b = inp.batch.len();
    let drop_prob = m.config().drop_prob;

    let out_y = m.forward_disease(&images)?;
    parts.set(LossTerm::CeY, ce_disease(&out_y.logits_causal, &y_t)?);
    if on(LossTerm::KlY) {
        parts.set(LossTerm::KlY, kl_uniform(&out_y.logits_spurious, Branch::Disease)?);
    }
    if on(LossTerm::BdY) {
        let cfg = InterventionConfig {
            drop_prob,
            rng_seed: mix(inp.step_seed, 0),
        };
        let q_bd = intervene(&out_y.q_causal, &out_y.q_spurious, &cfg)?;
        parts.set(LossTerm::BdY, ce_disease(&m.disease().classify_intervened(&q_bd)?, &y_t)?);
    }
    if b >= 2 && on(LossTerm::BatchYSame) {
        parts.set(
            LossTerm::BatchYSame,
            batch_contrastive(&out_y.q_causal, GroupLabels::MultiHot(&y), ContrastMode::Same)?,
        );
    }
    if b >= 2 && on(LossTerm::BatchYDiff) {
        parts.set(
            LossTerm::BatchYDiff,
            batch_contrastive(&out_y.q_spurious, GroupLabels::MultiHot(&y), ContrastMode::Diff)?,
        );
    }
    if let (Some(gt), true) = (inp.gt, on(LossTerm::Prior)) {
        let map = causality_map(&normalize_embeddings(&out_y.q_causal)?)?;
        parts.set(LossTerm::Prior, prior_loss(&map, gt)?);
    }

    let domain_terms = [
        LossTerm::CeD,
        LossTerm::KlD,
        LossTerm::BdD,
        LossTerm::Rs,
        LossTerm::BatchDSame,
        LossTerm::BatchDDiff,
    ];
    if !inp.use_domain || !domain_terms.iter().any(|&t| on(t)) {
        return Ok(parts);
    }
    let out_d = m.forward_domain(&images)?;
    if on(LossTerm::CeD) {
        parts.set(LossTerm::CeD, ce_domain(&out_d.logits_causal, &d)?);
    }
    if on(LossTerm::KlD) {
        parts.set(LossTerm::KlD, kl_uniform(&out_d.logits_spurious, Branch::Domain)?);
    }
    if on(LossTerm::BdD) {
        let cfg = InterventionConfig {
            drop_prob,
            rng_seed: mix(inp.step_seed, 1),
        };
        let q_bd = intervene(&out_d.q_causal, &out_d.q_spurious, &cfg)?;
        parts.set(LossTerm::BdD, ce_domain(&m.domain().classify_intervened(&q_bd)?, &d)?);
    }
    if on(LossTerm::Rs) {
        let scores = m
            .scorer()
            .score_pairs(&out_y.q_causal, &out_y.q_spurious, &out_d.q_causal, &out_d.q_spurious)?;
        parts.set(LossTerm::Rs, rs_loss_tensor(scores.values())?);
    }
    let n_groups = m.config().n_d;
    if b >= 2 && on(LossTerm::BatchDSame) {
        parts.set(
            LossTerm::BatchDSame,
            batch_contrastive(
                &out_d.q_causal,
                GroupLabels::Categorical { labels: &d, n_groups },
                ContrastMode::Same,
            )?,
        );
    }
    if b >= 2 && on(LossTerm::BatchDDiff) {
        parts.set(
            LossTerm::BatchDDiff,
            batch_contrastive(
                &out_d.q_spurious,
                GroupLabels::Categorical { labels: &d, n_groups },
                ContrastMode::Diff,
            )?,
        );
    }
    Ok(parts)
}

/// Loss terms and weighted total of one batch, without taking a step.
pub fn step_losses(
    network: &Network,
    dataset: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    gt: Option<&CausalityMap>,
    step_seed: u64,
) -> Result<(Tensor, LossBundle)> {
    let weights = cfg.effective_weights();
    let parts = match network {
        Network::Crocodile(m) => crocodile_parts(
            m,
            &StepInputs {
                dataset,
                batch,
                weights: &weights,
                use_domain: cfg.uses_domain_branch(),
                gt,
                step_seed,
            },
        )?,
        Network::Baseline(m) => {
            let dtype = network.dtype();
            let mut parts = LossParts::zeros(dtype)?;
            let logits = m.forward(&dataset.images(batch, dtype)?)?;
            parts.set(LossTerm::CeY, ce_disease(&logits, &dataset.disease_label_tensor(batch, dtype)?)?);
            parts
        }
    };
    let weights = match network {
        Network::Crocodile(_) => weights,
        Network::Baseline(_) => {
            let mut w = LossWeights::zeros();
            w.set(LossTerm::CeY, cfg.weights.get(LossTerm::CeY));
            w
        }
    };
    assemble_total(&parts, &weights)
}

fn check_datasets(network: &Network, train: &Dataset, val: &Dataset) -> Result<()> {
    let cfg = network.config();
    for (name, ds) in [("training", train), ("validation", val)] {
        if ds.is_empty() {
            return Err(Error::contract(format!("{name} dataset is empty")));
        }
        if ds.n_classes() != cfg.n_c || ds.channels != cfg.channels || ds.image_size != cfg.image_size {
            return Err(Error::contract(format!(
                "{name} dataset ({} classes, {} channels, {}px) does not match the model ({}, {}, {}px)",
                ds.n_classes(),
                ds.channels,
                ds.image_size,
                cfg.n_c,
                cfg.channels,
                cfg.image_size
            )));
        }
    }
    if matches!(network, Network::Crocodile(_)) && train.n_domains() > cfg.n_d {
        return Err(Error::contract(format!(
            "training data has {} domains, the domain branch predicts {}",
            train.n_domains(),
            cfg.n_d
        )));
    }
    Ok(())
}

/// Trains `network` in place and leaves it holding the best-validation weights,
/// which are also returned as a checkpoint. With `metrics_path`, one JSON line
/// per step is appended to that file.
pub fn train(
    network: &Network,
    train_set: &Dataset,
    val_set: &Dataset,
    graph: Option<&CausalGraph>,
    cfg: &TrainConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_datasets(network, train_set, val_set)?;
    let gt = match graph {
        Some(g) => {
            if g.nodes != train_set.class_names {
                return Err(Error::contract(
                    "causal graph nodes must match the dataset classes in order",
                ));
            }
            Some(build_gt_map(g, cfg.gt_levels)?)
        }
        None => {
            if cfg.effective_weights().get(LossTerm::Prior) > 0.0 && matches!(network, Network::Crocodile(_)) {
                log::warn!("no causal graph given; the task prior term stays 0");
            }
            None
        }
    };

    let mut history = History::default();
    let mut best = network.snapshot()?;
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: best,
            history,
        });
    }

    let mut log = match metrics_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let params = ParamsAdamW {
        lr: cfg.learning_rate,
        weight_decay: 0.0,
        ..ParamsAdamW::default()
    };
    let mut opt = AdamW::new(network.varmap().all_vars(), params)?;
    let start = Instant::now();
    let mut best_auc = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let batches = epoch_batches(train_set, cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let (total, bundle) = step_losses(network, train_set, batch, cfg, gt.as_ref(), mix(cfg.seed, step as u64))
                .map_err(|e| match e {
                    Error::NonFinite { term, .. } => Error::NonFinite { term, step },
                    other => other,
                })?;
            let grads = total.backward()?;
            let norms = grad_norms(network.varmap(), &grads)?;
            opt.step(&grads)?;
            loss_sum += bundle.total;
            let record = StepRecord {
                step,
                epoch,
                losses: bundle,
                grad_norms: norms,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(w, "{line}").map_err(|e| Error::io(metrics_path.expect("log implies path"), e))?;
            }
            history.steps.push(record);
            step += 1;
        }

        let val_auc = eval::mean_auc(network, val_set, cfg.eval_intervened)?;
        let mean_loss = loss_sum / batches.len().max(1) as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.5}, validation mean AUC {val_auc:.4}");
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            val_mean_auc: val_auc,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if val_auc > best_auc {
            best_auc = val_auc;
            best = network.snapshot()?;
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush().map_err(|e| Error::io(metrics_path.expect("log implies path"), e))?;
    }
    network.restore(&best)?;
    Ok(TrainOutcome {
        checkpoint: best,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_masks() {
        let mut cfg = TrainConfig::desk();
        cfg.ablation.insert(Ablation::NoCl);
        let w = cfg.effective_weights();
        for t in LossTerm::ALL {
            let masked = (6..=10).contains(&t.index());
            assert_eq!(w.get(t), if masked { 0.0 } else { 1.0 }, "{t}");
        }
        cfg.ablation = [Ablation::NoDomainBranch, Ablation::NoTp].into();
        let w = cfg.effective_weights();
        let kept: Vec<&str> = LossTerm::ALL.iter().filter(|&&t| w.get(t) > 0.0).map(|t| t.name()).collect();
        assert_eq!(kept, ["ce_y", "kl_y", "bd_y"]);
        assert!(!cfg.uses_domain_branch());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::desk();
        assert!(cfg.validate().is_ok());
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = 1e-3;
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = TrainConfig::desk();
        cfg.ablation.insert(Ablation::NoTp);
        cfg.weights.set(LossTerm::Rs, 2.0);
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
