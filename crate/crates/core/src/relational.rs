//! Relational scorer over cross-branch pairings of causal and spurious embeddings.
//!
//! Every sample contributes four pairs (disease embedding × domain embedding). Each
//! embedding is mean-pooled over its query axis, the two pooled vectors are
//! concatenated, and one shared affine map plus sigmoid turns the pair into a score.
//! Pairs mixing a causal with a spurious embedding are regressed to 1, pairs of the
//! same kind to 0.

use std::fmt;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{linear, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Branch, EmbeddingKind, FeatureEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairingKind {
    /// `Q_y^ca × Q_d^ca`
    CausalCausal,
    /// `Q_y^ca × Q_d^sp`
    CausalSpurious,
    /// `Q_y^sp × Q_d^sp`
    SpuriousSpurious,
    /// `Q_y^sp × Q_d^ca`
    SpuriousCausal,
}

impl PairingKind {
    /// Column order of [`PairScores`].
    pub const ALL: [PairingKind; 4] = [
        PairingKind::CausalCausal,
        PairingKind::CausalSpurious,
        PairingKind::SpuriousSpurious,
        PairingKind::SpuriousCausal,
    ];

    pub fn ground_truth(self) -> u8 {
        ground_truth(self)
    }

    fn disease_kind(self) -> EmbeddingKind {
        match self {
            PairingKind::CausalCausal | PairingKind::CausalSpurious => EmbeddingKind::Causal,
            _ => EmbeddingKind::Spurious,
        }
    }

    fn domain_kind(self) -> EmbeddingKind {
        match self {
            PairingKind::CausalCausal | PairingKind::SpuriousCausal => EmbeddingKind::Causal,
            _ => EmbeddingKind::Spurious,
        }
    }
}

impl fmt::Display for PairingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PairingKind::CausalCausal => "ca_y×ca_d",
            PairingKind::CausalSpurious => "ca_y×sp_d",
            PairingKind::SpuriousSpurious => "sp_y×sp_d",
            PairingKind::SpuriousCausal => "sp_y×ca_d",
        };
        f.write_str(s)
    }
}

/// 1 for pairings that mix causal with spurious features, 0 otherwise.
pub fn ground_truth(kind: PairingKind) -> u8 {
    u8::from(kind.disease_kind() != kind.domain_kind())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationalScore {
    pub value: f64,
    pub kind: PairingKind,
}

/// Scores for a batch as a `batch × 4` tensor, columns ordered as [`PairingKind::ALL`].
#[derive(Debug, Clone)]
pub struct PairScores {
    values: Tensor,
}

impl PairScores {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn to_scores(&self) -> Result<Vec<RelationalScore>> {
        let rows = self.values.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(rows
            .into_iter()
            .flat_map(|row| {
                row.into_iter()
                    .zip(PairingKind::ALL)
                    .map(|(value, kind)| RelationalScore { value, kind })
            })
            .collect())
    }

    /// Differentiable mean squared error against the ground truths.
    pub fn loss(&self) -> Result<Tensor> {
        rs_loss_tensor(&self.values)
    }
}

#[derive(Debug, Clone)]
pub struct RelationalScorer {
    proj: Linear,
}

impl RelationalScorer {
    pub fn new(width: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            proj: linear(2 * width, 1, vb.pp("proj"))?,
        })
    }

    pub fn from_linear(proj: Linear) -> Self {
        Self { proj }
    }

    pub fn score_pairs(
        &self,
        q_y_ca: &FeatureEmbedding,
        q_y_sp: &FeatureEmbedding,
        q_d_ca: &FeatureEmbedding,
        q_d_sp: &FeatureEmbedding,
    ) -> Result<PairScores> {
        let expect = [
            (q_y_ca, Branch::Disease, EmbeddingKind::Causal),
            (q_y_sp, Branch::Disease, EmbeddingKind::Spurious),
            (q_d_ca, Branch::Domain, EmbeddingKind::Causal),
            (q_d_sp, Branch::Domain, EmbeddingKind::Spurious),
        ];
        let batch = q_y_ca.batch();
        for (q, branch, kind) in expect {
            if q.branch() != branch || q.kind() != kind {
                return Err(Error::contract(format!(
                    "relational scorer expected {branch:?}/{kind:?}, got {:?}/{:?}",
                    q.branch(),
                    q.kind()
                )));
            }
            if q.batch() != batch {
                return Err(Error::contract(format!(
                    "relational scorer batch mismatch: {} vs {batch}",
                    q.batch()
                )));
            }
        }

        let pool = |q: &FeatureEmbedding| q.values().mean(1);
        let (y_ca, y_sp, d_ca, d_sp) = (pool(q_y_ca)?, pool(q_y_sp)?, pool(q_d_ca)?, pool(q_d_sp)?);
        let pairs = PairingKind::ALL
            .iter()
            .map(|kind| {
                let y = if kind.disease_kind() == EmbeddingKind::Causal { &y_ca } else { &y_sp };
                let d = if kind.domain_kind() == EmbeddingKind::Causal { &d_ca } else { &d_sp };
                Tensor::cat(&[y, d], D::Minus1)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let pairs = Tensor::stack(&pairs, 1)?;
        let logits = self.proj.forward(&pairs)?.squeeze(D::Minus1)?;
        Ok(PairScores {
            values: candle_nn::ops::sigmoid(&logits)?,
        })
    }
}

fn ground_truth_row(dtype: DType, device: &candle_core::Device) -> candle_core::Result<Tensor> {
    let gt: Vec<f64> = PairingKind::ALL.iter().map(|k| f64::from(k.ground_truth())).collect();
    Tensor::from_vec(gt, (1, 4), device)?.to_dtype(dtype)
}

/// Mean over samples and pairings of `(score − ground_truth)²` for a `batch × 4`
/// score tensor.
pub fn rs_loss_tensor(scores: &Tensor) -> Result<Tensor> {
    let (b, k) = scores.dims2()?;
    if b == 0 || k != 4 {
        return Err(Error::contract(format!(
            "relational loss needs a non-empty batch × 4 score tensor, got {b} × {k}"
        )));
    }
    let gt = ground_truth_row(scores.dtype(), scores.device())?;
    Ok(scores.broadcast_sub(&gt)?.sqr()?.mean_all()?)
}

pub fn rs_loss(scores: &[RelationalScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::contract("relational loss over an empty score list"));
    }
    let sum: f64 = scores
        .iter()
        .map(|s| (s.value - f64::from(s.kind.ground_truth())).powi(2))
        .sum();
    Ok(sum / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_marks_mixed_pairings() {
        assert_eq!(ground_truth(PairingKind::CausalSpurious), 1);
        assert_eq!(ground_truth(PairingKind::SpuriousCausal), 1);
        assert_eq!(ground_truth(PairingKind::CausalCausal), 0);
        assert_eq!(ground_truth(PairingKind::SpuriousSpurious), 0);
        let total: u32 = PairingKind::ALL.iter().map(|k| u32::from(k.ground_truth())).sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn rs_loss_hand_values() {
        let half: Vec<_> = PairingKind::ALL
            .iter()
            .map(|&kind| RelationalScore { value: 0.5, kind })
            .collect();
        assert!((rs_loss(&half).unwrap() - 0.25).abs() < 1e-15);

        let two = [
            RelationalScore { value: 0.9, kind: PairingKind::CausalSpurious },
            RelationalScore { value: 0.2, kind: PairingKind::CausalCausal },
        ];
        assert!((rs_loss(&two).unwrap() - 0.025).abs() < 1e-12);

        let exact: Vec<_> = PairingKind::ALL
            .iter()
            .map(|&kind| RelationalScore { value: f64::from(kind.ground_truth()), kind })
            .collect();
        assert_eq!(rs_loss(&exact).unwrap(), 0.0);
    }

    #[test]
    fn rs_loss_rejects_empty() {
        assert!(matches!(rs_loss(&[]), Err(Error::Contract(_))));
    }
}
