//! Finite-difference self-test suites used by the `gradcheck` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{AblationFlags, AttentionMode, DecoderSpec, McaModule, DEFAULT_KERNEL_SIZES};
use crate::error::Result;
use crate::loss::{cross_entropy_loss, LossMode};
use crate::model::{McaNet, VariantSpec};
use crate::nn::{bilinear_resize, conv2d, layer_norm_channel, mhca_axis, AttentionParams, Axis, ConvConfig};
use crate::tensor::gradcheck::grad_check_params;
use crate::tensor::{grad_check, Init, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Ops,
    Decoder,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ops" => Ok(Suite::Ops),
            "decoder" => Ok(Suite::Decoder),
            "all" => Ok(Suite::All),
            _ => Err(format!("unknown suite {s:?}; expected all, decoder or ops")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn fixture(shape: &[usize], seed: u64) -> Result<Tensor> {
    Tensor::new(shape, Init::Uniform { seed, lo: -1.0, hi: 1.0 })
}

fn project(y: Tensor) -> Result<Tensor> {
    let r = fixture(y.shape(), 0x5eed)?;
    y.mul(&r)?.sum()
}

fn ops(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut push = |name: &str, e: Result<f64>| -> Result<()> {
        out.push(CheckResult { name: name.into(), max_rel_error: e? });
        Ok(())
    };
    let a = fixture(&[2, 3, 4, 4], 1)?;
    let b = fixture(&[2, 3, 4, 4], 2)?;
    push("mul", grad_check(|x| project(x.mul(&b)?.add(x)?), &a, EPS))?;
    push("softmax", grad_check(|x| project(x.softmax(3)?), &a, EPS))?;
    push("gelu", grad_check(|x| project(x.scale(2.0)?.gelu()?), &a, EPS))?;
    let m = fixture(&[3, 4, 5], 3)?;
    let n = fixture(&[3, 5, 2], 4)?;
    push("matmul", grad_check(|x| project(x.matmul(&n)?), &m, EPS))?;
    let w = fixture(&[4, 3, 3, 3], 5)?;
    let cfg = ConvConfig { stride: (2, 2), padding: (1, 1), groups: 1 };
    push("conv2d", grad_check(|x| project(conv2d(x, &w, None, cfg)?), &a, EPS))?;
    let dw = fixture(&[3, 1, 5, 1], 6)?;
    let dcfg = ConvConfig { stride: (1, 1), padding: (2, 0), groups: 3 };
    push("conv2d depthwise", grad_check(|x| project(conv2d(x, &dw, None, dcfg)?), &a, EPS))?;
    let (g, be) = (fixture(&[3], 7)?, fixture(&[3], 8)?);
    push("layer_norm", grad_check(|x| project(layer_norm_channel(x, &g, &be, 1e-6)?), &a, EPS))?;
    push("bilinear_resize", grad_check(|x| project(bilinear_resize(x, 7, 9)?), &a, EPS))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ap = AttentionParams::new(&mut rng, 4, 2)?;
    let q = fixture(&[1, 4, 4, 5], 10)?;
    for axis in [Axis::Columns, Axis::Rows] {
        push(&format!("mhca_axis {axis:?}"), grad_check(|x| project(mhca_axis(x, &q, axis, &ap)?), &q, EPS))?;
    }
    let z = fixture(&[2, 3, 4, 4], 11)?;
    let labels: Vec<u8> = (0..32).map(|i| (i % 3) as u8).collect();
    push("cross_entropy", grad_check(|x| cross_entropy_loss(x, &labels, LossMode::Multiclass), &z, EPS))
}

fn decoder(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let f = fixture(&[1, 4, 5, 6], 13)?;
    for mode in AttentionMode::ALL {
        let ablation = AblationFlags { attention_mode: mode, ..AblationFlags::default() };
        let spec =
            DecoderSpec { channels: 4, heads: 2, kernel_sizes: DEFAULT_KERNEL_SIZES.to_vec(), num_classes: 1, ablation };
        let mca = McaModule::new(&mut rng, &spec)?;
        let mut params = Vec::new();
        mca.collect_params("mca", &mut params);
        let sweep = grad_check_params(|| project(mca.forward(&f)?), &params, 16, EPS)?;
        out.push(CheckResult { name: format!("mca {mode:?} params"), max_rel_error: sweep.max_rel_error });
        let e = grad_check(|x| project(mca.forward(x)?), &f, EPS)?;
        out.push(CheckResult { name: format!("mca {mode:?} input"), max_rel_error: e });
    }
    let (model, image, mask) = micro_fixture()?;
    let sweep = grad_check_params(
        || cross_entropy_loss(&model.forward(&image)?, &mask, LossMode::Binary),
        &model.decoder_params(),
        20,
        EPS,
    )?;
    out.push(CheckResult { name: "micro decoder params".into(), max_rel_error: sweep.max_rel_error });
    Ok(())
}

fn micro_fixture() -> Result<(McaNet, Tensor, Vec<u8>)> {
    let model = McaNet::new(&VariantSpec::preset("micro")?, 14)?;
    let image = Tensor::new(&[1, 1, 32, 32], Init::Uniform { seed: 15, lo: 0.0, hi: 1.0 })?;
    let mask = (0..1024).map(|i| u8::from((i / 32 + i % 32) % 5 < 2)).collect();
    Ok((model, image, mask))
}

fn full_model(out: &mut Vec<CheckResult>) -> Result<()> {
    let (model, image, mask) = micro_fixture()?;
    let params = model.named_params();
    let per_tensor = (1000 / params.len()).max(1);
    let sweep =
        grad_check_params(|| cross_entropy_loss(&model.forward(&image)?, &mask, LossMode::Binary), &params, per_tensor, EPS)?;
    out.push(CheckResult { name: "micro model params".into(), max_rel_error: sweep.max_rel_error });
    Ok(())
}

pub fn run(suite: Suite) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    match suite {
        Suite::Ops => ops(&mut out)?,
        Suite::Decoder => decoder(&mut out)?,
        Suite::All => {
            ops(&mut out)?;
            decoder(&mut out)?;
            full_model(&mut out)?;
        }
    }
    Ok(out)
}
