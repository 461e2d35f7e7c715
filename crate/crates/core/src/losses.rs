//! Loss terms of the training objective and their weighted assembly.
//!
//! All terms are nonnegative quantities to minimize. Probabilities entering a
//! logarithm are floored at [`PROB_FLOOR`], which is applied as a floor on the
//! log-probability so that saturated predictions stay finite.

use std::fmt;

use candle_core::{DType, Device, Tensor, D};
use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{Branch, FeatureEmbedding};

pub const PROB_FLOOR: f64 = 1e-12;

fn log_floor() -> f64 {
    PROB_FLOOR.ln()
}

/// `ln(1 + e^x)` computed without overflow.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    x.relu()? + tail
}

/// `ln σ(x)`, floored at `ln 1e-12`.
fn log_sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    softplus(&x.neg()?)?.neg()?.maximum(log_floor())
}

fn host_matrix(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

fn scalar_zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

/// Mean per-class binary cross-entropy of multi-label logits (sigmoid semantics).
pub fn ce_disease(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if logits.dims() != labels.dims() || logits.rank() != 2 {
        return Err(Error::Shape {
            context: "disease cross-entropy",
            expected: logits.dims().to_vec(),
            actual: labels.dims().to_vec(),
        });
    }
    let host = host_matrix(labels)?;
    if host.iter().flatten().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::contract("disease labels must be 0 or 1"));
    }
    let labels = labels.to_dtype(logits.dtype())?;
    let pos = labels.mul(&log_sigmoid(logits)?)?;
    let neg = labels.affine(-1.0, 1.0)?.mul(&log_sigmoid(&logits.neg()?)?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

fn one_hot(labels: &[usize], k: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0.0f64; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        v[i * k + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), k), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean softmax cross-entropy of categorical logits.
pub fn ce_domain(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape {
            context: "domain cross-entropy",
            expected: vec![b],
            actual: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!(
            "domain label {bad} out of range for {k} domains"
        )));
    }
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?.maximum(log_floor())?;
    let picked = logp.mul(&one_hot(labels, k, logits.dtype())?)?.sum(D::Minus1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// KL divergence from the uniform distribution to the predicted one.
///
/// Domain logits use a softmax over all `K` domains. Disease logits are treated
/// as `K` independent Bernoulli predictions, each compared to `(½, ½)`, and
/// averaged over classes.
pub fn kl_uniform(logits: &Tensor, task: Branch) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    if k < 2 {
        return Err(Error::contract(format!(
            "uniform KL needs at least 2 categories, got {k}"
        )));
    }
    let floor = log_floor();
    match task {
        Branch::Domain => {
            let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?.maximum(floor)?;
            // KL(u || p) = -ln K - mean_k ln p_k
            let per_row = (logp.mean(D::Minus1)?.neg()? - (k as f64).ln())?;
            Ok(per_row.mean_all()?)
        }
        Branch::Disease => {
            let lp = log_sigmoid(logits)?;
            let lq = log_sigmoid(&logits.neg()?)?;
            // KL((½,½) || (p, 1-p)) = -ln 2 - ½ (ln p + ln(1-p))
            let per = ((lp + lq)? * -0.5)?;
            let per = (per - std::f64::consts::LN_2)?;
            Ok(per.mean_all()?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// Distance to the mean of the same-label group (used on causal features).
    Same,
    /// Distance to the mean of the different-label group (used on spurious features).
    Diff,
}

/// Batch labels defining the contrastive groups.
#[derive(Debug, Clone, Copy)]
pub enum GroupLabels<'a> {
    /// Multi-hot disease labels; class `c` groups are compared on embedding row `c`.
    MultiHot(&'a [Vec<u8>]),
    /// Categorical domain labels; groups are compared on the whole embedding block.
    Categorical { labels: &'a [usize], n_groups: usize },
}

/// Mean squared Euclidean distance between each eligible sample embedding and the
/// mean embedding of its reference group.
///
/// With [`ContrastMode::Same`], a sample is eligible when its group has at least
/// one other member; with [`ContrastMode::Diff`], when at least one sample carries
/// a different label. Groups without an eligible sample contribute nothing, and a
/// batch without any eligible sample yields 0.
pub fn batch_contrastive(
    q: &FeatureEmbedding,
    labels: GroupLabels<'_>,
    mode: ContrastMode,
) -> Result<Tensor> {
    let b = q.batch();
    if b < 2 {
        return Err(Error::contract(format!(
            "batch contrastive loss needs at least 2 samples, got {b}"
        )));
    }
    match labels {
        GroupLabels::MultiHot(y) => multi_hot_contrast(q, y, mode),
        GroupLabels::Categorical { labels, n_groups } => {
            categorical_contrast(q, labels, n_groups, mode)
        }
    }
}

fn multi_hot_contrast(q: &FeatureEmbedding, y: &[Vec<u8>], mode: ContrastMode) -> Result<Tensor> {
    let (b, c) = (q.batch(), q.n_queries());
    if y.len() != b || y.iter().any(|row| row.len() != c) {
        return Err(Error::Shape {
            context: "multi-hot contrastive labels",
            expected: vec![b, c],
            actual: vec![y.len(), y.first().map_or(0, Vec::len)],
        });
    }
    // ref_w[j][c]: weight of sample j in class c's reference mean
    // elig[i][c]: whether (i, c) contributes a distance
    let mut ref_w = vec![0.0f64; b * c];
    let mut elig = vec![0.0f64; b * c];
    for class in 0..c {
        let pos: Vec<usize> = (0..b).filter(|&i| y[i][class] == 1).collect();
        let neg: Vec<usize> = (0..b).filter(|&i| y[i][class] != 1).collect();
        let (reference, ok) = match mode {
            ContrastMode::Same => (&pos, pos.len() >= 2),
            ContrastMode::Diff => (&neg, !pos.is_empty() && !neg.is_empty()),
        };
        if !ok {
            continue;
        }
        for &j in reference {
            ref_w[j * c + class] = 1.0 / reference.len() as f64;
        }
        for &i in &pos {
            elig[i * c + class] = 1.0;
        }
    }
    let count: f64 = elig.iter().sum();
    let values = q.values();
    if count == 0.0 {
        return scalar_zero(values);
    }
    let dtype = values.dtype();
    let ref_w = Tensor::from_vec(ref_w, (b, c, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let elig = Tensor::from_vec(elig, (b, c), &Device::Cpu)?.to_dtype(dtype)?;
    let means = values.broadcast_mul(&ref_w)?.sum_keepdim(0)?;
    let dist = values.broadcast_sub(&means)?.sqr()?.sum(D::Minus1)?;
    Ok((dist.mul(&elig)?.sum_all()? / count)?)
}

fn categorical_contrast(
    q: &FeatureEmbedding,
    labels: &[usize],
    n_groups: usize,
    mode: ContrastMode,
) -> Result<Tensor> {
    let b = q.batch();
    if labels.len() != b {
        return Err(Error::Shape {
            context: "categorical contrastive labels",
            expected: vec![b],
            actual: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_groups) {
        return Err(Error::contract(format!(
            "group label {bad} out of range for {n_groups} groups"
        )));
    }
    let mut sizes = vec![0usize; n_groups];
    for &l in labels {
        sizes[l] += 1;
    }
    // weights[i][j]: weight of sample j in sample i's reference mean
    let mut weights = vec![0.0f64; b * b];
    let mut elig = vec![0.0f64; b];
    for i in 0..b {
        let g = labels[i];
        let members = |j: usize| match mode {
            ContrastMode::Same => labels[j] == g,
            ContrastMode::Diff => labels[j] != g,
        };
        let n_ref = match mode {
            ContrastMode::Same => sizes[g],
            ContrastMode::Diff => b - sizes[g],
        };
        let ok = match mode {
            ContrastMode::Same => n_ref >= 2,
            ContrastMode::Diff => n_ref >= 1,
        };
        if !ok {
            continue;
        }
        elig[i] = 1.0;
        for j in (0..b).filter(|&j| members(j)) {
            weights[i * b + j] = 1.0 / n_ref as f64;
        }
    }
    let count: f64 = elig.iter().sum();
    let values = q.values();
    if count == 0.0 {
        return scalar_zero(values);
    }
    let dtype = values.dtype();
    let flat = values.flatten_from(1)?;
    let weights = Tensor::from_vec(weights, (b, b), &Device::Cpu)?.to_dtype(dtype)?;
    let elig = Tensor::from_vec(elig, b, &Device::Cpu)?.to_dtype(dtype)?;
    let means = weights.matmul(&flat)?;
    let dist = (flat - means)?.sqr()?.sum(D::Minus1)?;
    Ok((dist.mul(&elig)?.sum_all()? / count)?)
}

/// The twelve weighted terms of the objective, in weight order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossTerm {
    CeY,
    KlY,
    BdY,
    CeD,
    KlD,
    BdD,
    Rs,
    BatchYSame,
    BatchYDiff,
    BatchDSame,
    BatchDDiff,
    Prior,
}

impl LossTerm {
    pub const ALL: [LossTerm; 12] = [
        LossTerm::CeY,
        LossTerm::KlY,
        LossTerm::BdY,
        LossTerm::CeD,
        LossTerm::KlD,
        LossTerm::BdD,
        LossTerm::Rs,
        LossTerm::BatchYSame,
        LossTerm::BatchYDiff,
        LossTerm::BatchDSame,
        LossTerm::BatchDDiff,
        LossTerm::Prior,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::CeY => "ce_y",
            LossTerm::KlY => "kl_y",
            LossTerm::BdY => "bd_y",
            LossTerm::CeD => "ce_d",
            LossTerm::KlD => "kl_d",
            LossTerm::BdD => "bd_d",
            LossTerm::Rs => "rs",
            LossTerm::BatchYSame => "batch_y_same",
            LossTerm::BatchYDiff => "batch_y_diff",
            LossTerm::BatchDSame => "batch_d_same",
            LossTerm::BatchDDiff => "batch_d_diff",
            LossTerm::Prior => "prior",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `λ1 … λ12`, indexed by [`LossTerm`]. Serialized as a map from term name to
/// weight; terms missing from the map keep the default weight of 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda: [f64; 12],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: [1.0; 12] }
    }
}

impl LossWeights {
    pub fn zeros() -> Self {
        Self { lambda: [0.0; 12] }
    }

    pub fn get(&self, term: LossTerm) -> f64 {
        self.lambda[term.index()]
    }

    pub fn set(&mut self, term: LossTerm, value: f64) {
        self.lambda[term.index()] = value;
    }

    pub fn validate(&self) -> Result<()> {
        match self.lambda.iter().position(|l| !(l.is_finite() && *l >= 0.0)) {
            Some(i) => Err(Error::Config(format!(
                "loss weight for `{}` must be finite and >= 0, got {}",
                LossTerm::ALL[i],
                self.lambda[i]
            ))),
            None => Ok(()),
        }
    }
}

impl Serialize for LossWeights {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(12))?;
        for term in LossTerm::ALL {
            map.serialize_entry(term.name(), &self.get(term))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for LossWeights {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct WeightsVisitor;
        impl<'de> Visitor<'de> for WeightsVisitor {
            type Value = LossWeights;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of loss term names to weights")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<LossWeights, A::Error> {
                let mut w = LossWeights::default();
                while let Some(key) = map.next_key::<String>()? {
                    let term = LossTerm::from_name(&key).ok_or_else(|| {
                        de::Error::custom(format!("unknown loss term `{key}`"))
                    })?;
                    w.set(term, map.next_value()?);
                }
                Ok(w)
            }
        }
        deserializer.deserialize_map(WeightsVisitor)
    }
}

/// Unweighted term values and the weighted total of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub terms: [f64; 12],
    pub total: f64,
}

impl LossBundle {
    pub fn get(&self, term: LossTerm) -> f64 {
        self.terms[term.index()]
    }
}

impl Serialize for LossBundle {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(13))?;
        for term in LossTerm::ALL {
            map.serialize_entry(term.name(), &self.get(term))?;
        }
        map.serialize_entry("total", &self.total)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for LossBundle {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct BundleVisitor;
        impl<'de> Visitor<'de> for BundleVisitor {
            type Value = LossBundle;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of loss term names to numbers")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<LossBundle, A::Error> {
                let mut terms = [None; 12];
                let mut total = None;
                while let Some(key) = map.next_key::<String>()? {
                    let value: f64 = map.next_value()?;
                    if key == "total" {
                        total = Some(value);
                    } else if let Some(t) = LossTerm::from_name(&key) {
                        terms[t.index()] = Some(value);
                    }
                }
                let mut out = [0.0; 12];
                for (i, v) in terms.into_iter().enumerate() {
                    out[i] = v.ok_or_else(|| de::Error::missing_field(LossTerm::ALL[i].name()))?;
                }
                Ok(LossBundle {
                    terms: out,
                    total: total.ok_or_else(|| de::Error::missing_field("total"))?,
                })
            }
        }
        deserializer.deserialize_map(BundleVisitor)
    }
}

/// Scalar tensors for the twelve terms, indexed by [`LossTerm`].
#[derive(Debug, Clone)]
pub struct LossParts {
    pub terms: [Tensor; 12],
}

impl LossParts {
    /// All terms zero, as for a fully ablated objective.
    pub fn zeros(dtype: DType) -> Result<Self> {
        let z = Tensor::zeros((), dtype, &Device::Cpu)?;
        Ok(Self {
            terms: std::array::from_fn(|_| z.clone()),
        })
    }

    pub fn set(&mut self, term: LossTerm, value: Tensor) {
        self.terms[term.index()] = value;
    }
}

/// Weighted total `Σ λ_i · term_i` as a differentiable tensor, plus its record.
/// Terms with zero weight are left out of the tensor so they carry no gradient.
pub fn assemble_total(parts: &LossParts, weights: &LossWeights) -> Result<(Tensor, LossBundle)> {
    weights.validate()?;
    let mut values = [0.0; 12];
    for term in LossTerm::ALL {
        let v = parts.terms[term.index()].to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: term.name().to_string(),
                step: 0,
            });
        }
        values[term.index()] = v;
    }
    let dtype = parts.terms[0].dtype();
    let mut total = Tensor::zeros((), dtype, &Device::Cpu)?;
    let mut total_host = 0.0;
    for term in LossTerm::ALL {
        let w = weights.get(term);
        if w == 0.0 {
            continue;
        }
        total = (total + (&parts.terms[term.index()] * w)?)?;
        total_host += w * values[term.index()];
    }
    Ok((
        total,
        LossBundle {
            terms: values,
            total: total_host,
        },
    ))
}
