//! The two-branch disentangling network and the plain-backbone baseline.
//!
//! Each branch runs `backbone → feature enhancer → cross-attention decoder` and
//! reads the image tokens twice: once under the attention scores `A` (causal
//! embedding) and once under their renormalized complement (spurious embedding).
//! Two group-wise heads map the embeddings to logits; the causal head is reused
//! for the intervened embedding.

pub mod checkpoint;
pub mod decoder;
pub mod layers;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::RelationalScorer;
use decoder::{CrossAttentionDecoder, DisentangledAttention};
use layers::{Backbone, FeatureEnhancer, GroupLinear};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Disease,
    Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Causal,
    Spurious,
    Intervened,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Number of disease classes.
    pub n_c: usize,
    /// Number of source domains.
    pub n_d: usize,
    /// Embedding width per query.
    pub h: usize,
    pub backbone_width: Vec<usize>,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Probability of dropping the shuffled spurious addend in the intervention.
    pub drop_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small CNN sized for CPU training on 64×64 synthetic images.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            n_c: 5,
            n_d: 3,
            h: 32,
            backbone_width: vec![8, 16, 32, 32],
            n_heads: 4,
            n_layers: 1,
            drop_prob: 0.3,
        }
    }

    /// 320×320 inputs, nine findings, three source datasets.
    pub fn full_scale() -> Self {
        Self {
            image_size: 320,
            channels: 1,
            n_c: 9,
            n_d: 3,
            h: 128,
            backbone_width: vec![32, 64, 128, 256, 256],
            n_heads: 8,
            n_layers: 2,
            drop_prob: 0.3,
        }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.backbone_width.len()
    }

    pub fn n_tokens(&self) -> usize {
        let side = self.image_size / self.downsampling();
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_c < 2 {
            return fail(format!("n_c must be >= 2, got {}", self.n_c));
        }
        if self.n_d < 2 {
            return fail(format!("n_d must be >= 2, got {}", self.n_d));
        }
        if self.h < 4 {
            return fail(format!("h must be >= 4, got {}", self.h));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return fail(format!("drop_prob must lie in [0, 1], got {}", self.drop_prob));
        }
        if self.channels == 0 {
            return fail("channels must be >= 1".into());
        }
        if self.backbone_width.is_empty() || self.backbone_width.contains(&0) {
            return fail("backbone_width must be a non-empty list of positive widths".into());
        }
        if self.n_heads == 0 || self.h % self.n_heads != 0 {
            return fail(format!(
                "h ({}) must be divisible by n_heads ({})",
                self.h, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".into());
        }
        let down = self.downsampling();
        if self.image_size == 0 || self.image_size % down != 0 {
            return fail(format!(
                "image_size {} is not divisible by the backbone downsampling factor {down}",
                self.image_size
            ));
        }
        if self.image_size / down < 2 {
            return fail(format!(
                "image_size {} leaves fewer than 2×2 tokens after downsampling by {down}",
                self.image_size
            ));
        }
        Ok(())
    }
}

/// A `batch × n_queries × h` block of per-query embeddings tagged with the branch
/// it came from and what it represents.
#[derive(Debug, Clone)]
pub struct FeatureEmbedding {
    values: Tensor,
    branch: Branch,
    kind: EmbeddingKind,
}

impl FeatureEmbedding {
    pub fn new(values: Tensor, branch: Branch, kind: EmbeddingKind) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape {
                context: "feature embedding",
                expected: vec![0, 0, 0],
                actual: values.dims().to_vec(),
            });
        }
        Ok(Self {
            values,
            branch,
            kind,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn n_queries(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn is_finite(&self) -> Result<bool> {
        let v = self
            .values
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(v.iter().all(|x| x.is_finite()))
    }
}

/// Post-softmax cross-attention scores `batch × heads × queries × tokens`.
#[derive(Debug, Clone)]
pub struct AttentionScores {
    values: Tensor,
}

impl AttentionScores {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Elementwise `1 − A`.
    pub fn complement(&self) -> Result<Tensor> {
        Ok(self.values.affine(-1.0, 1.0)?)
    }
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub q_causal: FeatureEmbedding,
    pub q_spurious: FeatureEmbedding,
    /// `z`: logits from the causal embedding.
    pub logits_causal: Tensor,
    /// `z̄`: logits from the spurious embedding.
    pub logits_spurious: Tensor,
    pub attention: AttentionScores,
}

/// One branch: feature extraction plus the causal and spurious heads.
#[derive(Debug, Clone)]
pub struct BranchNet {
    branch: Branch,
    backbone: Backbone,
    enhancer: FeatureEnhancer,
    decoder: CrossAttentionDecoder,
    head_causal: GroupLinear,
    head_spurious: GroupLinear,
}

impl BranchNet {
    fn new(cfg: &ModelConfig, branch: Branch, vb: VarBuilder) -> Result<Self> {
        let n_queries = match branch {
            Branch::Disease => cfg.n_c,
            Branch::Domain => cfg.n_d,
        };
        let feat = *cfg.backbone_width.last().expect("validated non-empty");
        Ok(Self {
            branch,
            backbone: Backbone::new(cfg.channels, &cfg.backbone_width, vb.pp("backbone"))?,
            enhancer: FeatureEnhancer::new(feat, vb.pp("enhancer"))?,
            decoder: CrossAttentionDecoder::new(
                feat,
                cfg.n_tokens(),
                n_queries,
                cfg.h,
                cfg.n_heads,
                cfg.n_layers,
                vb.pp("decoder"),
            )?,
            head_causal: GroupLinear::new(n_queries, cfg.h, vb.pp("head_causal"))?,
            head_spurious: GroupLinear::new(n_queries, cfg.h, vb.pp("head_spurious"))?,
        })
    }

    /// Raw decoder output, exposing both readouts and the values they mix.
    pub fn probe(&self, images: &Tensor) -> Result<DisentangledAttention> {
        let feats = self.enhancer.forward(&self.backbone.forward(images)?)?;
        Ok(self.decoder.forward(&feats)?)
    }

    pub fn forward(&self, images: &Tensor) -> Result<BranchOutput> {
        let probe = self.probe(images)?;
        let logits_causal = self.head_causal.forward(&probe.q_causal)?;
        let logits_spurious = self.head_spurious.forward(&probe.q_spurious)?;
        Ok(BranchOutput {
            q_causal: FeatureEmbedding::new(probe.q_causal, self.branch, EmbeddingKind::Causal)?,
            q_spurious: FeatureEmbedding::new(
                probe.q_spurious,
                self.branch,
                EmbeddingKind::Spurious,
            )?,
            logits_causal,
            logits_spurious,
            attention: AttentionScores {
                values: probe.attention,
            },
        })
    }

    /// `ẑ`: the causal head applied to intervened features.
    pub fn classify_intervened(&self, q_bd: &FeatureEmbedding) -> Result<Tensor> {
        if q_bd.kind() != EmbeddingKind::Intervened || q_bd.branch() != self.branch {
            return Err(Error::contract(format!(
                "expected intervened {:?} features, got {:?} {:?}",
                self.branch,
                q_bd.kind(),
                q_bd.branch()
            )));
        }
        Ok(self.head_causal.forward(q_bd.values())?)
    }
}

fn check_images(cfg: &ModelConfig, images: &Tensor) -> Result<()> {
    let dims = images.dims();
    let ok = dims.len() == 4
        && dims[0] >= 1
        && dims[1] == cfg.channels
        && dims[2] == cfg.image_size
        && dims[3] == cfg.image_size;
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            context: "input images",
            expected: vec![dims.first().copied().unwrap_or(1).max(1), cfg.channels, cfg.image_size, cfg.image_size],
            actual: dims.to_vec(),
        })
    }
}

/// Parameter prefixes. Branch parameters never share storage.
pub const DISEASE_PREFIX: &str = "disease";
pub const DOMAIN_PREFIX: &str = "domain";
pub const SCORER_PREFIX: &str = "scorer";

#[derive(Clone)]
pub struct DualBranchModel {
    config: ModelConfig,
    varmap: VarMap,
    disease: BranchNet,
    domain: BranchNet,
    scorer: RelationalScorer,
}

impl DualBranchModel {
    pub fn build(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &Device::Cpu);
        let disease = BranchNet::new(&config, Branch::Disease, vb.pp(DISEASE_PREFIX))?;
        let domain = BranchNet::new(&config, Branch::Domain, vb.pp(DOMAIN_PREFIX))?;
        let scorer = RelationalScorer::new(config.h, vb.pp(SCORER_PREFIX))?;
        initialize(&varmap, seed)?;
        Ok(Self {
            config,
            varmap,
            disease,
            domain,
            scorer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn disease(&self) -> &BranchNet {
        &self.disease
    }

    pub fn domain(&self) -> &BranchNet {
        &self.domain
    }

    pub fn scorer(&self) -> &RelationalScorer {
        &self.scorer
    }

    pub fn forward_disease(&self, images: &Tensor) -> Result<BranchOutput> {
        check_images(&self.config, images)?;
        self.disease.forward(images)
    }

    pub fn forward_domain(&self, images: &Tensor) -> Result<BranchOutput> {
        check_images(&self.config, images)?;
        self.domain.forward(images)
    }

    /// Runs both branches on the same batch.
    pub fn forward(&self, images: &Tensor) -> Result<(BranchOutput, BranchOutput)> {
        check_images(&self.config, images)?;
        Ok((self.disease.forward(images)?, self.domain.forward(images)?))
    }
}

/// Conventional classifier: backbone, global average pooling, one linear layer.
#[derive(Clone)]
pub struct BaselineModel {
    config: ModelConfig,
    varmap: VarMap,
    backbone: Backbone,
    head: Linear,
}

impl BaselineModel {
    pub fn build(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &Device::Cpu);
        let backbone = Backbone::new(config.channels, &config.backbone_width, vb.pp("baseline.backbone"))?;
        let feat = *config.backbone_width.last().expect("validated non-empty");
        let head = linear(feat, config.n_c, vb.pp("baseline.head"))?;
        initialize(&varmap, seed)?;
        Ok(Self {
            config,
            varmap,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        check_images(&self.config, images)?;
        let feats = self.backbone.forward(images)?.mean((2, 3))?;
        Ok(self.head.forward(&feats)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Crocodile,
    Baseline,
}

impl std::fmt::Debug for DualBranchModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualBranchModel").field("config", &self.config).finish_non_exhaustive()
    }
}

impl std::fmt::Debug for BaselineModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BaselineModel").field("config", &self.config).finish_non_exhaustive()
    }
}

/// Either trainable architecture, behind one interface for training and evaluation.
#[derive(Debug, Clone)]
pub enum Network {
    Crocodile(DualBranchModel),
    Baseline(BaselineModel),
}

impl Network {
    pub fn build(arch: Architecture, config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        Ok(match arch {
            Architecture::Crocodile => Network::Crocodile(DualBranchModel::build(config, dtype, seed)?),
            Architecture::Baseline => Network::Baseline(BaselineModel::build(config, dtype, seed)?),
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Network::Crocodile(_) => Architecture::Crocodile,
            Network::Baseline(_) => Architecture::Baseline,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Network::Crocodile(m) => m.config(),
            Network::Baseline(m) => m.config(),
        }
    }

    pub fn varmap(&self) -> &VarMap {
        match self {
            Network::Crocodile(m) => m.varmap(),
            Network::Baseline(m) => m.varmap(),
        }
    }

    /// Disease logits used for prediction. For the two-branch model this is the
    /// causal head `z_y`; with `use_intervened` it is `ẑ_y` under the expected
    /// intervention, `Q^ca + (1 − drop_prob) · mean_batch(Q^sp)`.
    pub fn disease_logits(&self, images: &Tensor, use_intervened: bool) -> Result<Tensor> {
        match self {
            Network::Crocodile(m) => {
                let out = m.forward_disease(images)?;
                if use_intervened {
                    let keep = 1.0 - m.config().drop_prob;
                    let mean_sp = (out.q_spurious.values().mean_keepdim(0)? * keep)?;
                    let q = FeatureEmbedding::new(
                        out.q_causal.values().broadcast_add(&mean_sp)?,
                        Branch::Disease,
                        EmbeddingKind::Intervened,
                    )?;
                    m.disease().classify_intervened(&q)
                } else {
                    Ok(out.logits_causal)
                }
            }
            Network::Baseline(m) => m.forward(images),
        }
    }

    pub fn dtype(&self) -> DType {
        sorted_vars(self.varmap())
            .first()
            .map(|(_, t)| t.dtype())
            .unwrap_or(DType::F32)
    }

    /// Deep copy of all parameters.
    pub fn snapshot(&self) -> Result<Checkpoint> {
        let mut params = BTreeMap::new();
        for (name, t) in sorted_vars(self.varmap()) {
            params.insert(name, t.copy()?);
        }
        Ok(Checkpoint {
            architecture: self.architecture(),
            config: self.config().clone(),
            params,
        })
    }

    /// Overwrites parameters from a checkpoint with identical architecture and names.
    pub fn restore(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.architecture != self.architecture() || &ckpt.config != self.config() {
            return Err(Error::Checkpoint(
                "checkpoint architecture or config does not match the model".into(),
            ));
        }
        let data = self.varmap().data().lock().expect("varmap lock poisoned");
        if data.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                ckpt.params.len(),
                data.len()
            )));
        }
        for (name, var) in data.iter() {
            let src = ckpt
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Shape {
                    context: "checkpoint tensor",
                    expected: var.dims().to_vec(),
                    actual: src.dims().to_vec(),
                });
            }
            var.set(&src.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let dtype = ckpt
            .params
            .values()
            .next()
            .map(|t| t.dtype())
            .unwrap_or(DType::F32);
        let net = Network::build(ckpt.architecture, ckpt.config.clone(), dtype, 0)?;
        net.restore(ckpt)?;
        Ok(net)
    }
}

/// All variables of a var map sorted by name.
pub fn sorted_vars(varmap: &VarMap) -> Vec<(String, Tensor)> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut vars: Vec<(String, Tensor)> = data
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Seeded parameter initialization. Variables are visited in name order and
/// each is drawn from a rule keyed on its name and rank:
/// norm gains are ones, biases and norm shifts zeros, query and position tables
/// standard normal (positions scaled by 0.1), 4-D conv kernels He-uniform and all
/// other matrices Glorot-uniform.
fn initialize(varmap: &VarMap, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let values: Vec<f64> = match leaf {
            "gamma" => vec![1.0; n],
            "beta" | "bias" => vec![0.0; n],
            "queries" => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
            "positions" => (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    0.1 * v
                })
                .collect(),
            _ => {
                let fan_out = dims[0];
                let fan_in = if dims.len() > 1 { n / fan_out } else { 1 };
                let bound = if dims.len() == 4 {
                    (6.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                };
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, dims.as_slice(), &Device::Cpu)?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}
