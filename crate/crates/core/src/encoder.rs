//! Hierarchical MSCAN-style encoder producing a four-level feature pyramid.
//!
//! The stem (two 3×3 stride-2 convolutions) reaches stride 4; stages 2–4
//! each start with one 3×3 stride-2 convolution. Every stage then applies
//! its blocks of multi-scale convolutional attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, LayerNorm};
use crate::tensor::Tensor;

/// Strip kernel lengths of the three attention branches inside a block.
pub const BLOCK_STRIP_KERNELS: [usize; 3] = [7, 11, 21];
const FFN_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_in_channels() -> usize {
    3
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "encoder channels {:?} must be positive and strictly increasing",
                self.channels
            )));
        }
        if self.blocks.contains(&0) {
            return Err(Error::Config(format!("encoder blocks {:?} must all be at least 1", self.blocks)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("encoder in_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub e1: Tensor,
    pub e2: Tensor,
    pub e3: Tensor,
    pub e4: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.e1, &self.e2, &self.e3, &self.e4]
    }

    /// Each level halves the spatial extent of the previous one.
    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        for t in levels {
            if t.rank() != 4 || t.shape()[0] != levels[0].shape()[0] {
                return Err(Error::mismatch("feature_pyramid", format!("level shape {:?}", t.shape())));
            }
        }
        for pair in levels.windows(2) {
            let (a, b) = (pair[0].shape(), pair[1].shape());
            if a[2] != 2 * b[2] || a[3] != 2 * b[3] {
                return Err(Error::mismatch(
                    "feature_pyramid",
                    format!("{a:?} is not twice the spatial size of {b:?}"),
                ));
            }
        }
        Ok(())
    }
}

/// Multi-scale convolutional attention block followed by a feed-forward
/// sub-layer, both residual.
#[derive(Clone, Debug)]
pub struct MscaBlock {
    pub norm1: LayerNorm,
    pub dw5: Conv2d,
    /// (1×k, k×1) depthwise pairs.
    pub strips: Vec<(Conv2d, Conv2d)>,
    pub gate: Conv2d,
    pub norm2: LayerNorm,
    pub fc1: Conv2d,
    pub dw3: Conv2d,
    pub fc2: Conv2d,
}

impl MscaBlock {
    pub fn new(rng: &mut impl Rng, channels: usize) -> Result<MscaBlock> {
        let c = channels;
        let hidden = c * FFN_EXPANSION;
        let norm1 = LayerNorm::new(c)?;
        let dw5 = Conv2d::new(rng, ConvSpec::depthwise(c, (5, 5)))?;
        let strips = BLOCK_STRIP_KERNELS
            .iter()
            .map(|&k| {
                Ok((
                    Conv2d::new(rng, ConvSpec::depthwise(c, (1, k)))?,
                    Conv2d::new(rng, ConvSpec::depthwise(c, (k, 1)))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MscaBlock {
            norm1,
            dw5,
            strips,
            gate: Conv2d::new(rng, ConvSpec::pointwise(c, c))?,
            norm2: LayerNorm::new(c)?,
            fc1: Conv2d::new(rng, ConvSpec::pointwise(c, hidden))?,
            dw3: Conv2d::new(rng, ConvSpec::depthwise(hidden, (3, 3)))?,
            fc2: Conv2d::new(rng, ConvSpec::pointwise(hidden, c))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.gate.weight.shape()[0]
    }

    /// Attention sub-layer: `x + gate(dw5(u) + Σ strips(dw5(u))) ⊙ u` with
    /// `u = norm1(x)`.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.shape()[1] != self.channels() {
            return Err(Error::Config(format!(
                "block expects {} channels, got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let u = self.norm1.forward(x)?;
        let base = self.dw5.forward(&u)?;
        let mut acc = base.clone();
        for (horizontal, vertical) in &self.strips {
            acc = acc.add(&vertical.forward(&horizontal.forward(&base)?)?)?;
        }
        let attn = self.gate.forward(&acc)?;
        x.add(&attn.mul(&u)?)
    }

    pub fn feed_forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(&self.norm2.forward(x)?)?;
        let h = self.dw3.forward(&h)?.gelu()?;
        x.add(&self.fc2.forward(&h)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.feed_forward(&self.attention(x)?)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.dw5.collect_params(&format!("{prefix}.dw5"), out);
        for ((h, v), k) in self.strips.iter().zip(BLOCK_STRIP_KERNELS) {
            h.collect_params(&format!("{prefix}.strip{k}.h"), out);
            v.collect_params(&format!("{prefix}.strip{k}.v"), out);
        }
        self.gate.collect_params(&format!("{prefix}.gate"), out);
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.dw3.collect_params(&format!("{prefix}.dw3"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Stride-2 convolutions entering the stage (two for the stem).
    pub down: Vec<Conv2d>,
    pub blocks: Vec<MscaBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(rng: &mut impl Rng, spec: &EncoderSpec) -> Result<Encoder> {
        spec.validate()?;
        let mut stages = Vec::with_capacity(4);
        for (i, (&c, &blocks)) in spec.channels.iter().zip(&spec.blocks).enumerate() {
            let down = if i == 0 {
                let mid = (c / 2).max(1);
                vec![
                    Conv2d::new(rng, ConvSpec::new(spec.in_channels, mid, (3, 3)).stride(2))?,
                    Conv2d::new(rng, ConvSpec::new(mid, c, (3, 3)).stride(2))?,
                ]
            } else {
                vec![Conv2d::new(rng, ConvSpec::new(spec.channels[i - 1], c, (3, 3)).stride(2))?]
            };
            let blocks = (0..blocks).map(|_| MscaBlock::new(rng, c)).collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
        }
        Ok(Encoder { spec: spec.clone(), stages })
    }

    pub fn forward(&self, img: &Tensor) -> Result<FeaturePyramid> {
        let s = img.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::mismatch(
                "encoder",
                format!("image {s:?} must be [N, {}, H, W]", self.spec.in_channels),
            ));
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "image height and width must be divisible by 32".into(),
            });
        }
        let mut x = img.clone();
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for conv in &stage.down {
                x = conv.forward(&x)?;
            }
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
            outs.push(x.clone());
        }
        let mut it = outs.into_iter();
        let mut next = || it.next().expect("four stages");
        Ok(FeaturePyramid { e1: next(), e2: next(), e3: next(), e4: next() })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, conv) in stage.down.iter().enumerate() {
                conv.collect_params(&format!("{prefix}.stage{}.down{j}", i + 1), out);
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                block.collect_params(&format!("{prefix}.stage{}.block{j}", i + 1), out);
            }
        }
    }
}
