//! Full network: encoder, decoder and the named variant presets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{AblationFlags, Decoder, DecoderSpec, DEFAULT_KERNEL_SIZES};
use crate::encoder::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PRESET_NAMES: [&str; 4] = ["mcanet-t", "mcanet-s", "mcanet-b", "micro"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
}

impl VariantSpec {
    pub fn preset(name: &str) -> Result<VariantSpec> {
        let (channels, blocks, c, heads, in_channels) = match name {
            "mcanet-t" => ([32, 64, 160, 256], [3, 3, 5, 2], 64, 8, 3),
            "mcanet-s" => ([64, 128, 320, 512], [2, 2, 4, 2], 128, 8, 3),
            "mcanet-b" => ([64, 128, 320, 512], [3, 3, 12, 3], 128, 8, 3),
            "micro" => ([8, 16, 32, 64], [1, 1, 1, 1], 16, 2, 1),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}, expected one of {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(VariantSpec {
            encoder: EncoderSpec { channels, blocks, in_channels },
            decoder: DecoderSpec {
                channels: c,
                heads,
                kernel_sizes: DEFAULT_KERNEL_SIZES.to_vec(),
                num_classes: 1,
                ablation: AblationFlags::default(),
            },
        })
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.decoder.num_classes = num_classes;
        self
    }

    pub fn with_ablation(mut self, ablation: AblationFlags) -> Self {
        self.decoder.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

#[derive(Clone, Debug)]
pub struct McaNet {
    pub spec: VariantSpec,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl McaNet {
    /// Parameters are drawn from one ChaCha stream in a fixed order.
    pub fn new(spec: &VariantSpec, seed: u64) -> Result<McaNet> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut rng, &spec.encoder)?;
        let decoder = Decoder::new(&mut rng, &spec.decoder, spec.encoder.channels)?;
        Ok(McaNet { spec: spec.clone(), encoder, decoder })
    }

    /// `img: [N, in_channels, H, W]` to logits `[N, num_classes, H, W]`.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let pyramid = self.encoder.forward(img)?;
        let (h, w) = (img.shape()[2], img.shape()[3]);
        self.decoder.forward(&pyramid, h, w)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.collect_params("encoder", &mut out);
        self.decoder.collect_params("decoder", &mut out);
        out
    }

    pub fn decoder_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.decoder.collect_params("decoder", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    /// Rounds every parameter to the nearest f32 value.
    pub fn round_params_to_f32(&self) {
        for (_, p) in self.named_params() {
            p.update(|d| d.iter_mut().for_each(|v| *v = *v as f32 as f64));
        }
    }
}
