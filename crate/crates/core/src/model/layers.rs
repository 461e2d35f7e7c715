//! Building blocks shared by both branches: convolutional backbone, channel/spatial
//! feature enhancement, a layer norm built from differentiable primitives, and the
//! group-wise classifier head.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{conv2d, linear, Conv2d, Conv2dConfig, Init, Linear, VarBuilder};

/// Stack of `conv3x3 → ReLU → maxpool2` stages. Each stage halves the spatial size.
#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(in_channels: usize, widths: &[usize], vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut stages = Vec::with_capacity(widths.len());
        let mut c_in = in_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            stages.push(conv2d(c_in, c_out, 3, cfg, vb.pp(format!("stage{i}")))?);
            c_in = c_out;
        }
        Ok(Self { stages })
    }

    pub fn downsampling(&self) -> usize {
        1 << self.stages.len()
    }
}

impl Module for Backbone {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut x = xs.clone();
        for conv in &self.stages {
            x = conv.forward(&x)?.relu()?.max_pool2d(2)?;
        }
        Ok(x)
    }
}

/// Channel attention (global-pooled MLP gate) followed by spatial attention
/// (3×3 conv over the channel-wise mean and max maps).
#[derive(Debug, Clone)]
pub struct FeatureEnhancer {
    squeeze: Linear,
    excite: Linear,
    spatial: Conv2d,
}

impl FeatureEnhancer {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = (channels / 4).max(1);
        let squeeze = linear(channels, hidden, vb.pp("squeeze"))?;
        let excite = linear(hidden, channels, vb.pp("excite"))?;
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let spatial = conv2d(2, 1, 3, cfg, vb.pp("spatial"))?;
        Ok(Self {
            squeeze,
            excite,
            spatial,
        })
    }
}

impl Module for FeatureEnhancer {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = xs.dims4()?;
        let pooled = xs.mean((2, 3))?;
        let gate = self.excite.forward(&self.squeeze.forward(&pooled)?.relu()?)?;
        let gate = candle_nn::ops::sigmoid(&gate)?.reshape((b, c, 1, 1))?;
        let xs = xs.broadcast_mul(&gate)?;

        let avg = xs.mean_keepdim(1)?;
        let max = xs.max_keepdim(1)?;
        let maps = Tensor::cat(&[&avg, &max], 1)?;
        let gate = candle_nn::ops::sigmoid(&self.spatial.forward(&maps)?)?;
        xs.broadcast_mul(&gate)
    }
}

/// Layer norm over the last dimension, composed from primitive ops so that it
/// participates in backpropagation.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(size: usize, vb: VarBuilder) -> Result<Self> {
        let gamma = vb.get_with_hints(size, "gamma", Init::Const(1.0))?;
        let beta = vb.get_with_hints(size, "beta", Init::Const(0.0))?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let centered = xs.broadcast_sub(&xs.mean_keepdim(D::Minus1)?)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Maps row `g` of a `batch × groups × width` tensor to logit `g` with a per-row
/// weight vector and bias.
#[derive(Debug, Clone)]
pub struct GroupLinear {
    weight: Tensor,
    bias: Tensor,
}

impl GroupLinear {
    pub fn new(groups: usize, width: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints((groups, width), "weight", Init::Const(0.0))?;
        let bias = vb.get_with_hints(groups, "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }
}

impl Module for GroupLinear {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        xs.broadcast_mul(&self.weight)?
            .sum(D::Minus1)?
            .broadcast_add(&self.bias)
    }
}

/// Two-layer ReLU MLP used inside the decoder.
#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(width: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            up: linear(width, hidden, vb.pp("up"))?,
            down: linear(hidden, width, vb.pp("down"))?,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(xs)?.relu()?)
    }
}
