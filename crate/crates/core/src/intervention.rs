//! Latent backdoor adjustment: each sample's causal features are paired with the
//! spurious features of a randomly chosen batch mate.
//!
//! `Q^bd[i] = Q^ca[i] + m_i · Q^sp[π(i)]` with `π` a uniform permutation of the
//! batch and `m_i ~ Bernoulli(1 − drop_prob)`, one draw per sample.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingKind, FeatureEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub drop_prob: f64,
    pub rng_seed: u64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            drop_prob: 0.3,
            rng_seed: 0,
        }
    }
}

/// The random draws behind one intervention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionPlan {
    /// `permutation[i]` is the batch row whose spurious features sample `i` receives.
    pub permutation: Vec<usize>,
    /// `true` where the spurious addend is kept.
    pub keep: Vec<bool>,
}

impl InterventionPlan {
    pub fn draw(batch: usize, cfg: &InterventionConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.drop_prob) {
            return Err(Error::Config(format!(
                "drop_prob must lie in [0, 1], got {}",
                cfg.drop_prob
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut permutation: Vec<usize> = (0..batch).collect();
        permutation.shuffle(&mut rng);
        let keep = (0..batch)
            .map(|_| rng.random::<f64>() >= cfg.drop_prob)
            .collect();
        Ok(Self { permutation, keep })
    }
}

pub fn intervene(
    q_causal: &FeatureEmbedding,
    q_spurious: &FeatureEmbedding,
    cfg: &InterventionConfig,
) -> Result<FeatureEmbedding> {
    if q_causal.kind() != EmbeddingKind::Causal || q_spurious.kind() != EmbeddingKind::Spurious {
        return Err(Error::contract(format!(
            "intervention needs causal and spurious features, got {:?} and {:?}",
            q_causal.kind(),
            q_spurious.kind()
        )));
    }
    if q_causal.branch() != q_spurious.branch() {
        return Err(Error::contract("intervention across different branches"));
    }
    if q_causal.values().dims() != q_spurious.values().dims() {
        return Err(Error::Shape {
            context: "intervention",
            expected: q_causal.values().dims().to_vec(),
            actual: q_spurious.values().dims().to_vec(),
        });
    }
    if q_causal.batch() == 0 {
        return Err(Error::contract("intervention on an empty batch"));
    }
    let plan = InterventionPlan::draw(q_causal.batch(), cfg)?;
    apply_plan(q_causal, q_spurious, &plan)
}

/// Applies fixed draws; shapes and kinds are assumed checked by the caller.
pub fn apply_plan(
    q_causal: &FeatureEmbedding,
    q_spurious: &FeatureEmbedding,
    plan: &InterventionPlan,
) -> Result<FeatureEmbedding> {
    let ca = q_causal.values();
    let b = q_causal.batch();
    let perm: Vec<u32> = plan.permutation.iter().map(|&i| i as u32).collect();
    let perm = Tensor::from_vec(perm, b, &Device::Cpu)?;
    let shuffled = q_spurious.values().index_select(&perm, 0)?;
    let mask: Vec<f64> = plan.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, (b, 1, 1), &Device::Cpu)?.to_dtype(ca.dtype())?;
    let values = if plan.keep.iter().all(|k| !k) {
        // keeps the identity exact for drop_prob = 1
        ca.clone()
    } else {
        ca.add(&shuffled.broadcast_mul(&mask)?)?
    };
    FeatureEmbedding::new(values, q_causal.branch(), EmbeddingKind::Intervened)
}

/// Host copy of an embedding for inspection.
pub fn to_host(q: &FeatureEmbedding) -> Result<Vec<Vec<Vec<f64>>>> {
    Ok(q.values().to_dtype(DType::F64)?.to_vec3::<f64>()?)
}
