//! Query-based cross-attention decoder whose final layer splits the attention
//! mass into a task-relevant part `A` and its renormalized complement.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{linear, Init, Linear, VarBuilder};

use super::layers::{FeedForward, LayerNorm};

/// Multi-head projections for cross-attention from queries to image tokens.
#[derive(Debug, Clone)]
struct CrossAttention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    n_heads: usize,
}

impl CrossAttention {
    fn new(width: usize, n_heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            q_proj: linear(width, width, vb.pp("q_proj"))?,
            k_proj: linear(width, width, vb.pp("k_proj"))?,
            v_proj: linear(width, width, vb.pp("v_proj"))?,
            out_proj: linear(width, width, vb.pp("out_proj"))?,
            n_heads,
        })
    }

    fn split_heads(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, n, w) = xs.dims3()?;
        xs.reshape((b, n, self.n_heads, w / self.n_heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Returns post-softmax scores `batch × heads × queries × tokens` and the
    /// head-split values `batch × heads × tokens × head_dim`.
    fn scores(&self, queries: &Tensor, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.split_heads(&self.q_proj.forward(queries)?)?;
        let k = self.split_heads(&self.k_proj.forward(tokens)?)?;
        let v = self.split_heads(&self.v_proj.forward(tokens)?)?;
        let scale = 1.0 / ((q.dim(D::Minus1)? as f64).sqrt());
        let logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        Ok((attn, v))
    }
}

/// Weighted sum of head-split values, merged back to `batch × queries × width`.
pub fn readout(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
    let (b, _, nq, _) = weights.dims4()?;
    let out = weights.matmul(values)?;
    let (_, heads, _, dh) = out.dims4()?;
    out.transpose(1, 2)?.contiguous()?.reshape((b, nq, heads * dh))
}

/// `(1 − A)` renormalized to sum to one over the token axis.
pub fn normalized_complement(attn: &Tensor) -> Result<Tensor> {
    let comp = attn.affine(-1.0, 1.0)?;
    let mass = comp.sum_keepdim(D::Minus1)?;
    comp.broadcast_div(&mass)
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    attn: CrossAttention,
    norm_attn: LayerNorm,
    ffn: FeedForward,
    norm_ffn: LayerNorm,
}

impl DecoderLayer {
    fn new(width: usize, n_heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            attn: CrossAttention::new(width, n_heads, vb.pp("attn"))?,
            norm_attn: LayerNorm::new(width, vb.pp("norm_attn"))?,
            ffn: FeedForward::new(width, 2 * width, vb.pp("ffn"))?,
            norm_ffn: LayerNorm::new(width, vb.pp("norm_ffn"))?,
        })
    }

    /// Residual + norm + feed-forward applied to one attention readout.
    fn update(&self, queries: &Tensor, read: &Tensor) -> Result<Tensor> {
        let x = self
            .norm_attn
            .forward(&(queries + self.attn.out_proj.forward(read)?)?)?;
        self.norm_ffn.forward(&(&x + self.ffn.forward(&x)?)?)
    }

    fn forward(&self, queries: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (attn, v) = self.attn.scores(queries, tokens)?;
        self.update(queries, &readout(&attn, &v)?)
    }
}

/// Everything the final, disentangling layer computes.
#[derive(Debug, Clone)]
pub struct DisentangledAttention {
    /// Post-softmax scores `A`.
    pub attention: Tensor,
    /// Renormalized complement of `A`.
    pub complement: Tensor,
    /// Head-split values the readouts are taken over.
    pub values: Tensor,
    /// `A · V`, merged over heads.
    pub causal_readout: Tensor,
    /// `complement · V`, merged over heads.
    pub spurious_readout: Tensor,
    pub q_causal: Tensor,
    pub q_spurious: Tensor,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionDecoder {
    token_proj: Linear,
    positions: Tensor,
    queries: Tensor,
    layers: Vec<DecoderLayer>,
    last: DecoderLayer,
}

impl CrossAttentionDecoder {
    pub fn new(
        in_channels: usize,
        n_tokens: usize,
        n_queries: usize,
        width: usize,
        n_heads: usize,
        n_layers: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        let token_proj = linear(in_channels, width, vb.pp("token_proj"))?;
        let positions = vb.get_with_hints((n_tokens, width), "positions", Init::Const(0.0))?;
        let queries = vb.get_with_hints((n_queries, width), "queries", Init::Const(0.0))?;
        let layers = (0..n_layers.saturating_sub(1))
            .map(|i| DecoderLayer::new(width, n_heads, vb.pp(format!("layer{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let last = DecoderLayer::new(width, n_heads, vb.pp("disentangle"))?;
        Ok(Self {
            token_proj,
            positions,
            queries,
            layers,
            last,
        })
    }

    /// `features` is the enhanced feature map `batch × channels × h × w`.
    pub fn forward(&self, features: &Tensor) -> Result<DisentangledAttention> {
        let b = features.dim(0)?;
        let tokens = features.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let tokens = self
            .token_proj
            .forward(&tokens)?
            .broadcast_add(&self.positions)?;

        let (nq, w) = self.queries.dims2()?;
        let mut q = self.queries.unsqueeze(0)?.broadcast_as((b, nq, w))?.contiguous()?;
        for layer in &self.layers {
            q = layer.forward(&q, &tokens)?;
        }

        let (attention, values) = self.last.attn.scores(&q, &tokens)?;
        let complement = normalized_complement(&attention)?;
        let causal_readout = readout(&attention, &values)?;
        let spurious_readout = readout(&complement, &values)?;
        let q_causal = self.last.update(&q, &causal_readout)?;
        let q_spurious = self.last.update(&q, &spurious_readout)?;
        Ok(DisentangledAttention {
            attention,
            complement,
            values,
            causal_readout,
            spurious_readout,
            q_causal,
            q_spurious,
        })
    }
}
