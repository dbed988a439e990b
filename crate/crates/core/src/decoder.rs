//! Multi-scale cross-axis attention decoder.
//!
//! `fuse_pyramid` merges E2..E4 into a width-C map F. The MCA module runs
//! two strip-convolution branches over Norm(F), lets each branch attend
//! into the other along the orthogonal axis, and adds the residual F. The
//! head concatenates E1, applies two 1×1 convolutions and upsamples to the
//! image size. The decoder contains no activation functions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, mhca_axis, AttentionParams, Axis, Conv2d, ConvSpec, LayerNorm};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Cross,
    ParallelNoCross,
    SequentialAxial,
    None,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] =
        [AttentionMode::Cross, AttentionMode::ParallelNoCross, AttentionMode::SequentialAxial, AttentionMode::None];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum E1Usage {
    #[default]
    SkipConcat,
    InsideMca,
    Absent,
}

impl E1Usage {
    pub const ALL: [E1Usage; 3] = [E1Usage::SkipConcat, E1Usage::InsideMca, E1Usage::Absent];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub multi_scale: bool,
    pub attention_mode: AttentionMode,
    pub residual_input: bool,
    pub use_e1: E1Usage,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            multi_scale: true,
            attention_mode: AttentionMode::Cross,
            residual_input: true,
            use_e1: E1Usage::SkipConcat,
        }
    }
}

impl AblationFlags {
    /// Every combination of the four switches (4 × 2 × 2 × 3 = 48).
    pub fn all_combinations() -> Vec<AblationFlags> {
        let mut out = Vec::with_capacity(48);
        for attention_mode in AttentionMode::ALL {
            for multi_scale in [true, false] {
                for residual_input in [true, false] {
                    for use_e1 in E1Usage::ALL {
                        out.push(AblationFlags { multi_scale, attention_mode, residual_input, use_e1 });
                    }
                }
            }
        }
        out
    }
}

pub const DEFAULT_KERNEL_SIZES: [usize; 3] = [7, 11, 21];

fn default_kernel_sizes() -> Vec<usize> {
    DEFAULT_KERNEL_SIZES.to_vec()
}

fn default_num_classes() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub channels: usize,
    pub heads: usize,
    #[serde(default = "default_kernel_sizes")]
    pub kernel_sizes: Vec<usize>,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.kernel_sizes.is_empty() {
            return Err(Error::Config("decoder kernel_sizes must not be empty".into()));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("strip kernel size {k} must be odd")));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Orientation of a strip branch: `X` uses (1, k) kernels, `Y` uses (k, 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StripAxis {
    X,
    Y,
}

/// `Conv1×1(Σ_i Conv1D_i(u))` over an already normalized input `u`.
#[derive(Clone, Debug)]
pub struct MscBranch {
    pub axis: StripAxis,
    pub strips: Vec<Conv2d>,
    pub proj: Conv2d,
    /// When false the strip sum is replaced by `u` itself. The strip
    /// parameters are kept so checkpoints have the same layout.
    pub multi_scale: bool,
}

impl MscBranch {
    pub fn new(rng: &mut impl Rng, channels: usize, axis: StripAxis, kernels: &[usize], multi_scale: bool) -> Result<Self> {
        if let Some(k) = kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("strip kernel size {k} must be odd")));
        }
        let strips = kernels
            .iter()
            .map(|&k| {
                let kernel = match axis {
                    StripAxis::X => (1, k),
                    StripAxis::Y => (k, 1),
                };
                Conv2d::new(rng, ConvSpec::depthwise(channels, kernel))
            })
            .collect::<Result<Vec<_>>>()?;
        let proj = Conv2d::new(rng, ConvSpec::pointwise(channels, channels))?;
        Ok(MscBranch { axis, strips, proj, multi_scale })
    }

    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        if !self.multi_scale {
            return self.proj.forward(u);
        }
        let mut acc: Option<Tensor> = None;
        for conv in &self.strips {
            let y = conv.forward(u)?;
            acc = Some(match acc {
                Some(a) => a.add(&y)?,
                None => y,
            });
        }
        self.proj.forward(&acc.expect("at least one strip kernel"))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for conv in &self.strips {
            let (kh, kw) = conv.kernel();
            conv.collect_params(&format!("{prefix}.strip{}", kh.max(kw)), out);
        }
        self.proj.collect_params(&format!("{prefix}.proj"), out);
    }
}

/// The multi-scale cross-axis attention module.
#[derive(Clone, Debug)]
pub struct McaModule {
    pub norm: LayerNorm,
    pub branch_x: MscBranch,
    pub branch_y: MscBranch,
    /// Column attention: queries from the y branch, keys/values from x.
    pub attn_top: AttentionParams,
    /// Row attention: queries from the x branch, keys/values from y.
    pub attn_bottom: AttentionParams,
    pub out_top: Conv2d,
    pub out_bottom: Conv2d,
    pub flags: AblationFlags,
}

impl McaModule {
    pub fn new(rng: &mut impl Rng, spec: &DecoderSpec) -> Result<McaModule> {
        spec.validate()?;
        let c = spec.channels;
        let ms = spec.ablation.multi_scale;
        Ok(McaModule {
            norm: LayerNorm::new(c)?,
            branch_x: MscBranch::new(rng, c, StripAxis::X, &spec.kernel_sizes, ms)?,
            branch_y: MscBranch::new(rng, c, StripAxis::Y, &spec.kernel_sizes, ms)?,
            attn_top: AttentionParams::new(rng, c, spec.heads)?,
            attn_bottom: AttentionParams::new(rng, c, spec.heads)?,
            out_top: Conv2d::new(rng, ConvSpec::pointwise(c, c))?,
            out_bottom: Conv2d::new(rng, ConvSpec::pointwise(c, c))?,
            flags: spec.ablation,
        })
    }

    pub fn channels(&self) -> usize {
        self.out_top.weight.shape()[0]
    }

    /// One strip branch applied to `f`, including the normalization.
    pub fn branch(&self, f: &Tensor, axis: StripAxis) -> Result<Tensor> {
        let u = self.norm.forward(f)?;
        match axis {
            StripAxis::X => self.branch_x.forward(&u),
            StripAxis::Y => self.branch_y.forward(&u),
        }
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        if f.rank() != 4 || f.shape()[1] != self.channels() {
            return Err(Error::Config(format!(
                "MCA module expects {} channels, got input {:?}",
                self.channels(),
                f.shape()
            )));
        }
        let u = self.norm.forward(f)?;
        let out = match self.flags.attention_mode {
            AttentionMode::SequentialAxial => {
                let rows = mhca_axis(&u, &u, Axis::Rows, &self.attn_bottom)?;
                let cols = mhca_axis(&rows, &rows, Axis::Columns, &self.attn_top)?;
                self.out_top.forward(&cols)?
            }
            mode => {
                let fx = self.branch_x.forward(&u)?;
                let fy = self.branch_y.forward(&u)?;
                let (top, bottom) = match mode {
                    AttentionMode::Cross => (
                        mhca_axis(&fy, &fx, Axis::Columns, &self.attn_top)?,
                        mhca_axis(&fx, &fy, Axis::Rows, &self.attn_bottom)?,
                    ),
                    AttentionMode::ParallelNoCross => (
                        mhca_axis(&fx, &fx, Axis::Columns, &self.attn_top)?,
                        mhca_axis(&fy, &fy, Axis::Rows, &self.attn_bottom)?,
                    ),
                    _ => (fx, fy),
                };
                self.out_top.forward(&top)?.add(&self.out_bottom.forward(&bottom)?)?
            }
        };
        if self.flags.residual_input {
            out.add(f)
        } else {
            Ok(out)
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm.collect_params(&format!("{prefix}.norm"), out);
        self.branch_x.collect_params(&format!("{prefix}.branch_x"), out);
        self.branch_y.collect_params(&format!("{prefix}.branch_y"), out);
        self.attn_top.collect_params(&format!("{prefix}.attn_top"), out);
        self.attn_bottom.collect_params(&format!("{prefix}.attn_bottom"), out);
        self.out_top.collect_params(&format!("{prefix}.out_top"), out);
        self.out_bottom.collect_params(&format!("{prefix}.out_bottom"), out);
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub spec: DecoderSpec,
    pub reduce: Conv2d,
    pub mca: McaModule,
    pub merge: Conv2d,
    pub classify: Conv2d,
}

impl Decoder {
    /// `encoder_channels` are the widths of E1..E4.
    pub fn new(rng: &mut impl Rng, spec: &DecoderSpec, encoder_channels: [usize; 4]) -> Result<Decoder> {
        spec.validate()?;
        let [c1, c2, c3, c4] = encoder_channels;
        let c = spec.channels;
        let e1 = spec.ablation.use_e1;
        let fused = c2 + c3 + c4 + if e1 == E1Usage::InsideMca { c1 } else { 0 };
        let merged = c + if e1 == E1Usage::SkipConcat { c1 } else { 0 };
        Ok(Decoder {
            spec: spec.clone(),
            reduce: Conv2d::new(rng, ConvSpec::pointwise(fused, c))?,
            mca: McaModule::new(rng, spec)?,
            merge: Conv2d::new(rng, ConvSpec::pointwise(merged, c))?,
            classify: Conv2d::new(rng, ConvSpec::pointwise(c, spec.num_classes))?,
        })
    }

    /// Upsample E2..E4 to E1's size, concatenate and reduce to C channels.
    pub fn fuse_pyramid(&self, p: &FeaturePyramid) -> Result<Tensor> {
        p.validate()?;
        let (h, w) = (p.e1.shape()[2], p.e1.shape()[3]);
        let mut parts = Vec::with_capacity(4);
        if self.spec.ablation.use_e1 == E1Usage::InsideMca {
            parts.push(p.e1.clone());
        }
        for level in [&p.e2, &p.e3, &p.e4] {
            parts.push(bilinear_resize(level, h, w)?);
        }
        let fused = Tensor::concat_channels(&parts)?;
        if fused.shape()[1] != self.reduce.weight.shape()[1] {
            return Err(Error::mismatch(
                "fuse_pyramid",
                format!("pyramid gives {} channels, reduction expects {}", fused.shape()[1], self.reduce.weight.shape()[1]),
            ));
        }
        self.reduce.forward(&fused)
    }

    pub fn decode_head(&self, f_out: &Tensor, e1: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let merged = if self.spec.ablation.use_e1 == E1Usage::SkipConcat {
            if f_out.shape()[2..] != e1.shape()[2..] {
                return Err(Error::mismatch(
                    "decode_head",
                    format!("F_out {:?} and E1 {:?} differ spatially", f_out.shape(), e1.shape()),
                ));
            }
            Tensor::concat_channels(&[f_out.clone(), e1.clone()])?
        } else {
            f_out.clone()
        };
        let logits = self.classify.forward(&self.merge.forward(&merged)?)?;
        bilinear_resize(&logits, out_h, out_w)
    }

    pub fn forward(&self, p: &FeaturePyramid, out_h: usize, out_w: usize) -> Result<Tensor> {
        let f = self.fuse_pyramid(p)?;
        let f_out = self.mca.forward(&f)?;
        self.decode_head(&f_out, &p.e1, out_h, out_w)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.reduce.collect_params(&format!("{prefix}.reduce"), out);
        self.mca.collect_params(&format!("{prefix}.mca"), out);
        self.merge.collect_params(&format!("{prefix}.merge"), out);
        self.classify.collect_params(&format!("{prefix}.classify"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::new(shape, Init::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
    }

    fn spec(c: usize, heads: usize, ablation: AblationFlags) -> DecoderSpec {
        DecoderSpec { channels: c, heads, kernel_sizes: DEFAULT_KERNEL_SIZES.to_vec(), num_classes: 2, ablation }
    }

    fn zero(conv: &Conv2d) {
        conv.weight.update(|w| w.fill(0.0));
        if let Some(b) = &conv.bias {
            b.update(|b| b.fill(0.0));
        }
    }

    #[test]
    fn zeroed_output_convs_give_exact_identity() {
        let mca = McaModule::new(&mut ChaCha8Rng::seed_from_u64(1), &spec(8, 2, AblationFlags::default())).unwrap();
        zero(&mca.out_top);
        zero(&mca.out_bottom);
        let f = rand(&[2, 8, 6, 6], 2);
        let bits = |t: &Tensor| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&mca.forward(&f).unwrap()), bits(&f));
    }

    #[test]
    fn all_modes_preserve_shape() {
        for mode in AttentionMode::ALL {
            let flags = AblationFlags { attention_mode: mode, ..Default::default() };
            let mca = McaModule::new(&mut ChaCha8Rng::seed_from_u64(1), &spec(8, 2, flags)).unwrap();
            assert_eq!(mca.forward(&rand(&[1, 8, 6, 6], 3)).unwrap().shape(), &[1, 8, 6, 6], "{mode:?}");
        }
    }

    #[test]
    fn zero_strips_annihilate_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let branch = MscBranch::new(&mut rng, 4, StripAxis::X, &[7, 11, 21], true).unwrap();
        for s in &branch.strips {
            zero(s);
        }
        branch.proj.bias.as_ref().unwrap().update(|b| b.fill(0.0));
        assert!(branch.forward(&rand(&[1, 4, 5, 5], 1)).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn branch_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c, h, w) = (2, 5, 5);
        for axis in [StripAxis::X, StripAxis::Y] {
            let branch = MscBranch::new(&mut rng, c, axis, &[3, 5], true).unwrap();
            let u = rand(&[1, c, h, w], 7);
            let got = branch.forward(&u).unwrap().to_vec();
            let ud = u.to_vec();
            let mut sum = vec![0.0; c * h * w];
            for conv in &branch.strips {
                let wt = conv.weight.to_vec();
                let b = conv.bias.as_ref().unwrap().to_vec();
                let (kh, kw) = conv.kernel();
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = b[ch];
                            for i in 0..kh {
                                for j in 0..kw {
                                    let sy = y as isize + i as isize - (kh / 2) as isize;
                                    let sx = x as isize + j as isize - (kw / 2) as isize;
                                    if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                                        acc += wt[(ch * kh + i) * kw + j] * ud[(ch * h + sy as usize) * w + sx as usize];
                                    }
                                }
                            }
                            sum[(ch * h + y) * w + x] += acc;
                        }
                    }
                }
            }
            let pw = branch.proj.weight.to_vec();
            let pb = branch.proj.bias.as_ref().unwrap().to_vec();
            for o in 0..c {
                for s in 0..h * w {
                    let want: f64 = pb[o] + (0..c).map(|i| pw[o * c + i] * sum[i * h * w + s]).sum::<f64>();
                    assert!((got[o * h * w + s] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn strip_shapes_at_twelve() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for axis in [StripAxis::X, StripAxis::Y] {
            let b = MscBranch::new(&mut rng, 3, axis, &DEFAULT_KERNEL_SIZES, true).unwrap();
            assert_eq!(b.forward(&rand(&[1, 3, 12, 12], 1)).unwrap().shape(), &[1, 3, 12, 12]);
        }
    }

    #[test]
    fn spec_errors() {
        assert!(matches!(spec(8, 3, AblationFlags::default()).validate(), Err(Error::Config(_))));
        let mut s = spec(8, 2, AblationFlags::default());
        s.kernel_sizes = vec![7, 10];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.kernel_sizes = vec![7];
        s.num_classes = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn mca_gradients() {
        for mode in AttentionMode::ALL {
            let flags = AblationFlags { attention_mode: mode, ..Default::default() };
            let mca = McaModule::new(&mut ChaCha8Rng::seed_from_u64(3), &spec(8, 2, flags)).unwrap();
            let f = rand(&[1, 8, 6, 6], 4);
            let err = grad_check(|f| mca.forward(f)?.sum(), &f, 1e-5).unwrap();
            assert!(err < 1e-4, "{mode:?} {err}");
        }
    }

    fn pyramid(n: usize, chans: [usize; 4], h: usize) -> FeaturePyramid {
        let lv = |i: usize| rand(&[n, chans[i], h >> i, h >> i], 10 + i as u64).into_param();
        FeaturePyramid { e1: lv(0), e2: lv(1), e3: lv(2), e4: lv(3) }
    }

    #[test]
    fn constant_pyramid_with_averaging_reduction_is_constant() {
        let d = Decoder::new(&mut ChaCha8Rng::seed_from_u64(1), &spec(4, 2, AblationFlags::default()), [2, 2, 2, 2])
            .unwrap();
        d.reduce.weight.update(|w| w.fill(1.0 / 6.0));
        d.reduce.bias.as_ref().unwrap().update(|b| b.fill(0.0));
        let lv = |i: usize| Tensor::full(&[1, 2, 8 >> i, 8 >> i], 0.3).unwrap();
        let p = FeaturePyramid { e1: lv(0), e2: lv(1), e3: lv(2), e4: lv(3) };
        let f = d.fuse_pyramid(&p).unwrap();
        assert_eq!(f.shape(), &[1, 4, 8, 8]);
        assert!(f.to_vec().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn gradient_reaches_every_level() {
        let chans = [4, 6, 8, 10];
        let d = Decoder::new(&mut ChaCha8Rng::seed_from_u64(2), &spec(8, 2, AblationFlags::default()), chans).unwrap();
        let p = pyramid(1, chans, 8);
        d.forward(&p, 32, 32).unwrap().mean().unwrap().backward().unwrap();
        for t in p.levels() {
            assert!(t.grad().unwrap().iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn head_channels_and_size() {
        for e1 in E1Usage::ALL {
            let chans = [4, 6, 8, 10];
            let mut s = spec(8, 2, AblationFlags { use_e1: e1, ..Default::default() });
            s.num_classes = 9;
            let d = Decoder::new(&mut ChaCha8Rng::seed_from_u64(2), &s, chans).unwrap();
            assert_eq!(d.forward(&pyramid(2, chans, 8), 32, 32).unwrap().shape(), &[2, 9, 32, 32]);
        }
    }

    #[test]
    fn head_rejects_spatial_mismatch() {
        let d = Decoder::new(&mut ChaCha8Rng::seed_from_u64(2), &spec(8, 2, AblationFlags::default()), [4, 6, 8, 10])
            .unwrap();
        let err = d.decode_head(&rand(&[1, 8, 4, 4], 1), &rand(&[1, 4, 8, 8], 2), 32, 32);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn forty_eight_combinations() {
        assert_eq!(AblationFlags::all_combinations().len(), 48);
    }
}
