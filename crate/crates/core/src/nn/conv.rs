use rand::Rng;

use crate::accounting::{record, FlopKind};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, is_meta_mode, Function, Tensor};

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvConfig {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig { stride: (1, 1), padding: (0, 0), groups: 1 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Path {
    Pointwise,
    Depthwise,
    General,
}

fn output_extent(input: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

fn plan(x: &[usize], w: &[usize], cfg: &ConvConfig) -> Result<(Dims, Path)> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::mismatch("conv2d", format!("input {x:?}, weight {w:?} must be 4-D")));
    }
    let (n, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
    let (c_out, c_in_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    let g = cfg.groups;
    if g == 0 || c_in % g != 0 || c_out % g != 0 {
        return Err(Error::Config(format!(
            "groups {g} must divide input channels {c_in} and output channels {c_out}"
        )));
    }
    if c_in / g != c_in_g {
        return Err(Error::mismatch(
            "conv2d",
            format!("input has {c_in} channels, weight expects {} ({c_in_g} per group)", c_in_g * g),
        ));
    }
    let (oh, ow) = match (
        output_extent(h, cfg.padding.0, kh, cfg.stride.0),
        output_extent(wd, cfg.padding.1, kw, cfg.stride.1),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::InvalidShape {
                shape: x.to_vec(),
                reason: format!("no positive output extent for kernel {kh}x{kw} with {cfg:?}"),
            })
        }
    };
    let dims = Dims { n, c_in, h, w: wd, c_out, kh, kw, oh, ow };
    let path = if kh == 1 && kw == 1 && cfg.stride == (1, 1) && cfg.padding == (0, 0) && g == 1 {
        Path::Pointwise
    } else if g == c_in && g == c_out {
        Path::Depthwise
    } else {
        Path::General
    };
    Ok((dims, path))
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
fn tap_range(k: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    // input index = o*stride + k - pad must lie in [0, input)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k { ((input + pad - k - 1) / stride + 1).min(output) } else { 0 };
    (lo, hi.max(lo))
}

fn depthwise_forward(x: &[f64], w: &[f64], d: &Dims, cfg: &ConvConfig, out: &mut [f64]) {
    let (sh, sw) = cfg.stride;
    let (ph, pw) = cfg.padding;
    for n in 0..d.n {
        for c in 0..d.c_in {
            let plane = (n * d.c_in + c) * d.h * d.w;
            let oplane = (n * d.c_out + c) * d.oh * d.ow;
            let kern = &w[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
            for ki in 0..d.kh {
                let (ylo, yhi) = tap_range(ki, ph, sh, d.h, d.oh);
                for kj in 0..d.kw {
                    let wv = kern[ki * d.kw + kj];
                    let (xlo, xhi) = tap_range(kj, pw, sw, d.w, d.ow);
                    if xlo == xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * sh + ki - ph;
                        let orow = &mut out[oplane + oy * d.ow..oplane + (oy + 1) * d.ow];
                        let irow = &x[plane + iy * d.w..plane + (iy + 1) * d.w];
                        if sw == 1 {
                            let start = xlo + kj - pw;
                            for (o, i) in orow[xlo..xhi].iter_mut().zip(&irow[start..]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * irow[ox * sw + kj - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &Dims,
    cfg: &ConvConfig,
    gx: Option<&mut Vec<f64>>,
    gw: Option<&mut Vec<f64>>,
) {
    let (sh, sw) = cfg.stride;
    let (ph, pw) = cfg.padding;
    let mut gx = gx;
    let mut gw = gw;
    for n in 0..d.n {
        for c in 0..d.c_in {
            let plane = (n * d.c_in + c) * d.h * d.w;
            let oplane = (n * d.c_out + c) * d.oh * d.ow;
            for ki in 0..d.kh {
                let (ylo, yhi) = tap_range(ki, ph, sh, d.h, d.oh);
                for kj in 0..d.kw {
                    let widx = (c * d.kh + ki) * d.kw + kj;
                    let wv = w[widx];
                    let (xlo, xhi) = tap_range(kj, pw, sw, d.w, d.ow);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * sh + ki - ph;
                        let grow = &g[oplane + oy * d.ow..oplane + (oy + 1) * d.ow];
                        let ibase = plane + iy * d.w;
                        for ox in xlo..xhi {
                            let ix = ibase + ox * sw + kj - pw;
                            acc += grow[ox] * x[ix];
                            if let Some(gx) = gx.as_deref_mut() {
                                gx[ix] += grow[ox] * wv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Unfolds one group of one sample into `[c_in_g·kh·kw, oh·ow]`.
fn im2col(x: &[f64], d: &Dims, cfg: &ConvConfig, n: usize, c0: usize, c_in_g: usize, cols: &mut [f64]) {
    let (sh, sw) = cfg.stride;
    let (ph, pw) = cfg.padding;
    let spatial = d.oh * d.ow;
    cols.fill(0.0);
    for ci in 0..c_in_g {
        let plane = (n * d.c_in + c0 + ci) * d.h * d.w;
        for ki in 0..d.kh {
            let (ylo, yhi) = tap_range(ki, ph, sh, d.h, d.oh);
            for kj in 0..d.kw {
                let (xlo, xhi) = tap_range(kj, pw, sw, d.w, d.ow);
                let row = ((ci * d.kh + ki) * d.kw + kj) * spatial;
                for oy in ylo..yhi {
                    let iy = oy * sh + ki - ph;
                    for ox in xlo..xhi {
                        cols[row + oy * d.ow + ox] = x[plane + iy * d.w + ox * sw + kj - pw];
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &Dims, cfg: &ConvConfig, n: usize, c0: usize, c_in_g: usize, gx: &mut [f64]) {
    let (sh, sw) = cfg.stride;
    let (ph, pw) = cfg.padding;
    let spatial = d.oh * d.ow;
    for ci in 0..c_in_g {
        let plane = (n * d.c_in + c0 + ci) * d.h * d.w;
        for ki in 0..d.kh {
            let (ylo, yhi) = tap_range(ki, ph, sh, d.h, d.oh);
            for kj in 0..d.kw {
                let (xlo, xhi) = tap_range(kj, pw, sw, d.w, d.ow);
                let row = ((ci * d.kh + ki) * d.kw + kj) * spatial;
                for oy in ylo..yhi {
                    let iy = oy * sh + ki - ph;
                    for ox in xlo..xhi {
                        gx[plane + iy * d.w + ox * sw + kj - pw] += cols[row + oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

struct Conv2dFn {
    x: Tensor,
    weight: Tensor,
    bias: Option<Tensor>,
    cfg: ConvConfig,
    dims: Dims,
    path: Path,
}

impl Function for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.x, &self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let d = &self.dims;
        let x = self.x.data();
        let w = self.weight.data();
        let need_x = self.x.requires_grad();
        let need_w = self.weight.requires_grad();
        let mut gx = need_x.then(|| vec![0.0; x.len()]);
        let mut gw = need_w.then(|| vec![0.0; w.len()]);
        let spatial = d.oh * d.ow;
        match self.path {
            Path::Pointwise => {
                let hw = d.h * d.w;
                for n in 0..d.n {
                    let gn = &g[n * d.c_out * spatial..(n + 1) * d.c_out * spatial];
                    if let Some(gx) = gx.as_mut() {
                        gemm_tn(d.c_in, d.c_out, hw, &w, gn, &mut gx[n * d.c_in * hw..(n + 1) * d.c_in * hw]);
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm_nt(d.c_out, hw, d.c_in, gn, &x[n * d.c_in * hw..(n + 1) * d.c_in * hw], gw);
                    }
                }
            }
            Path::Depthwise => {
                depthwise_backward(&x, &w, g, d, &self.cfg, gx.as_mut(), gw.as_mut());
            }
            Path::General => {
                let groups = self.cfg.groups;
                let (c_in_g, c_out_g) = (d.c_in / groups, d.c_out / groups);
                let krows = c_in_g * d.kh * d.kw;
                let mut cols = vec![0.0; krows * spatial];
                let mut gcols = vec![0.0; krows * spatial];
                for n in 0..d.n {
                    for grp in 0..groups {
                        let gslice = &g[(n * d.c_out + grp * c_out_g) * spatial..(n * d.c_out + (grp + 1) * c_out_g) * spatial];
                        let wslice = &w[grp * c_out_g * krows..(grp + 1) * c_out_g * krows];
                        if let Some(gw) = gw.as_mut() {
                            im2col(&x, d, &self.cfg, n, grp * c_in_g, c_in_g, &mut cols);
                            gemm_nt(c_out_g, spatial, krows, gslice, &cols, &mut gw[grp * c_out_g * krows..(grp + 1) * c_out_g * krows]);
                        }
                        if let Some(gx) = gx.as_mut() {
                            gcols.fill(0.0);
                            gemm_tn(krows, c_out_g, spatial, wslice, gslice, &mut gcols);
                            col2im(&gcols, d, &self.cfg, n, grp * c_in_g, c_in_g, gx);
                        }
                    }
                }
            }
        }
        let mut grads = vec![gx, gw];
        if let Some(b) = &self.bias {
            grads.push(b.requires_grad().then(|| {
                let mut gb = vec![0.0; d.c_out];
                for (i, chunk) in g.chunks(spatial).enumerate() {
                    gb[i % d.c_out] += chunk.iter().sum::<f64>();
                }
                gb
            }));
        }
        grads
    }
}

/// 2-D cross-correlation (no kernel flip) of `x: [N, C_in, H, W]` with
/// `weight: [C_out, C_in/groups, kH, kW]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, cfg: ConvConfig) -> Result<Tensor> {
    let (d, path) = plan(x.shape(), weight.shape(), &cfg)?;
    if let Some(b) = bias {
        if b.shape() != [d.c_out] {
            return Err(Error::mismatch("conv2d", format!("bias {:?} for {} outputs", b.shape(), d.c_out)));
        }
    }
    let spatial = d.oh * d.ow;
    let out_shape = vec![d.n, d.c_out, d.oh, d.ow];
    record(
        FlopKind::Conv,
        2 * (d.n * d.c_out * spatial * (d.c_in / cfg.groups) * d.kh * d.kw) as u64,
    );
    if is_meta_mode() {
        return Ok(Tensor::meta(out_shape));
    }

    let mut out = vec![0.0; d.n * d.c_out * spatial];
    {
        let xd = x.data();
        let wd = weight.data();
        match path {
            Path::Pointwise => {
                let hw = d.h * d.w;
                for n in 0..d.n {
                    gemm_nn(
                        d.c_out,
                        d.c_in,
                        hw,
                        &wd,
                        &xd[n * d.c_in * hw..(n + 1) * d.c_in * hw],
                        &mut out[n * d.c_out * hw..(n + 1) * d.c_out * hw],
                    );
                }
            }
            Path::Depthwise => depthwise_forward(&xd, &wd, &d, &cfg, &mut out),
            Path::General => {
                let groups = cfg.groups;
                let (c_in_g, c_out_g) = (d.c_in / groups, d.c_out / groups);
                let krows = c_in_g * d.kh * d.kw;
                let mut cols = vec![0.0; krows * spatial];
                for n in 0..d.n {
                    for grp in 0..groups {
                        im2col(&xd, &d, &cfg, n, grp * c_in_g, c_in_g, &mut cols);
                        let o0 = (n * d.c_out + grp * c_out_g) * spatial;
                        gemm_nn(
                            c_out_g,
                            krows,
                            spatial,
                            &wd[grp * c_out_g * krows..(grp + 1) * c_out_g * krows],
                            &cols,
                            &mut out[o0..o0 + c_out_g * spatial],
                        );
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for (i, chunk) in out.chunks_mut(spatial).enumerate() {
                let v = bd[i % d.c_out];
                chunk.iter_mut().for_each(|o| *o += v);
            }
        }
    }
    Tensor::from_op(
        out_shape,
        out,
        Conv2dFn {
            x: x.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            cfg,
            dims: d,
            path,
        },
    )
}

/// Convolution layer holding its parameters.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub cfg: ConvConfig,
}

/// Builder-style description of a convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: (usize, usize)) -> Self {
        ConvSpec { c_in, c_out, kernel, stride: (1, 1), groups: 1, bias: true }
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        ConvSpec::new(c_in, c_out, (1, 1))
    }

    pub fn depthwise(channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec { groups: channels, ..ConvSpec::new(channels, channels, kernel) }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = (stride, stride);
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    /// Fan-in scaled uniform init, `U(-1/√fan_in, 1/√fan_in)`, with
    /// "same" padding `((kH−1)/2, (kW−1)/2)`.
    pub fn new(rng: &mut impl Rng, spec: ConvSpec) -> Result<Conv2d> {
        let ConvSpec { c_in, c_out, kernel: (kh, kw), stride, groups, bias } = spec;
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide {c_in} input and {c_out} output channels"
            )));
        }
        let fan_in = (c_in / groups) * kh * kw;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Tensor::uniform_from(rng, &[c_out, c_in / groups, kh, kw], -bound, bound)?.into_param();
        let bias = if bias {
            Some(Tensor::uniform_from(rng, &[c_out], -bound, bound)?.into_param())
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            cfg: ConvConfig { stride, padding: ((kh - 1) / 2, (kw - 1) / 2), groups },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.cfg)
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s[2], s[3])
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
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

    /// Direct seven-loop cross-correlation.
    fn oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, cfg: ConvConfig) -> Vec<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, c_in_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let c_out_g = c_out / cfg.groups;
        let oh = (h + 2 * cfg.padding.0 - kh) / cfg.stride.0 + 1;
        let ow = (wd + 2 * cfg.padding.1 - kw) / cfg.stride.1 + 1;
        let (xd, wdat) = (x.data(), w.data());
        let mut out = vec![0.0; n * c_out * oh * ow];
        for b_ in 0..n {
            for co in 0..c_out {
                let grp = co / c_out_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.map(|b| b.data()[co]).unwrap_or(0.0);
                        for ci in 0..c_in_g {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * cfg.stride.0 + ki) as isize - cfg.padding.0 as isize;
                                    let ix = (ox * cfg.stride.1 + kj) as isize - cfg.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let cin = grp * c_in_g + ci;
                                    s += wdat[((co * c_in_g + ci) * kh + ki) * kw + kj]
                                        * xd[((b_ * c_in + cin) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((b_ * c_out + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn identity_pointwise() {
        let x = rand(&[2, 3, 4, 5], 1);
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 4] = 1.0);
        let w = Tensor::from_vec(&[3, 3, 1, 1], eye).unwrap();
        let b = Tensor::zeros(&[3]).unwrap();
        let y = conv2d(&x, &w, Some(&b), ConvConfig::default()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn depthwise_strip_box_response() {
        // one-hot row through a (1,7) all-ones depthwise kernel → 7-wide box
        let mut data = vec![0.0; 15];
        data[7] = 1.0;
        let x = Tensor::from_vec(&[1, 1, 1, 15], data).unwrap();
        let w = Tensor::full(&[1, 1, 1, 7], 1.0).unwrap();
        let cfg = ConvConfig { padding: (0, 3), groups: 1, ..Default::default() };
        let y = conv2d(&x, &w, None, cfg).unwrap().to_vec();
        let want: Vec<f64> = (0..15).map(|i| if (4..=10).contains(&i) { 1.0 } else { 0.0 }).collect();
        assert_eq!(y, want);
    }

    #[test]
    fn stride_two_output_size() {
        let x = rand(&[1, 2, 8, 8], 2);
        let w = rand(&[4, 2, 3, 3], 3);
        let cfg = ConvConfig { stride: (2, 2), padding: (1, 1), groups: 1 };
        let y = conv2d(&x, &w, None, cfg).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
        assert_close(&y.to_vec(), &oracle(&x, &w, None, cfg), 1e-12);
    }

    #[test]
    fn all_paths_match_oracle() {
        let cases = [
            // (c_in, c_out, kh, kw, stride, pad, groups)
            (3, 5, 1, 1, 1, (0, 0), 1),
            (4, 4, 1, 7, 1, (0, 3), 4),
            (4, 4, 11, 1, 1, (5, 0), 4),
            (4, 4, 5, 5, 1, (2, 2), 4),
            (4, 4, 3, 3, 2, (1, 1), 4),
            (3, 6, 3, 3, 2, (1, 1), 1),
            (4, 6, 3, 3, 1, (1, 1), 2),
            (2, 3, 1, 1, 2, (0, 0), 1),
        ];
        for (i, &(c_in, c_out, kh, kw, s, pad, groups)) in cases.iter().enumerate() {
            let x = rand(&[2, c_in, 7, 9], 10 + i as u64);
            let w = rand(&[c_out, c_in / groups, kh, kw], 20 + i as u64);
            let b = rand(&[c_out], 30 + i as u64);
            let cfg = ConvConfig { stride: (s, s), padding: pad, groups };
            let y = conv2d(&x, &w, Some(&b), cfg).unwrap();
            assert_close(&y.to_vec(), &oracle(&x, &w, Some(&b), cfg), 1e-12);
        }
    }

    #[test]
    fn gradients_on_every_path() {
        let cases = [
            (3, 5, 1, 1, 1, (0, 0), 1),
            (4, 4, 1, 7, 1, (0, 3), 4),
            (4, 4, 3, 3, 2, (1, 1), 4),
            (3, 6, 3, 3, 2, (1, 1), 1),
            (4, 6, 3, 3, 1, (1, 1), 2),
        ];
        for (i, &(c_in, c_out, kh, kw, s, pad, groups)) in cases.iter().enumerate() {
            let x = rand(&[2, c_in, 5, 6], 40 + i as u64);
            let w = rand(&[c_out, c_in / groups, kh, kw], 50 + i as u64);
            let b = rand(&[c_out], 60 + i as u64);
            let cfg = ConvConfig { stride: (s, s), padding: pad, groups };
            let probe = conv2d(&x, &w, Some(&b), cfg).unwrap();
            let r = rand(probe.shape(), 70 + i as u64);
            let ex = grad_check(|x| conv2d(x, &w, Some(&b), cfg)?.mul(&r)?.sum(), &x, 1e-5).unwrap();
            let ew = grad_check(|w| conv2d(&x, w, Some(&b), cfg)?.mul(&r)?.sum(), &w, 1e-5).unwrap();
            let eb = grad_check(|b| conv2d(&x, &w, Some(b), cfg)?.mul(&r)?.sum(), &b, 1e-5).unwrap();
            assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "case {i}: {ex} {ew} {eb}");
        }
    }

    #[test]
    fn configuration_errors() {
        let x = rand(&[1, 3, 4, 4], 1);
        let w = rand(&[4, 1, 3, 3], 2);
        let cfg = ConvConfig { groups: 2, ..Default::default() };
        assert!(matches!(conv2d(&x, &w, None, cfg), Err(Error::Config(_))));
        let w = rand(&[4, 2, 3, 3], 2);
        assert!(matches!(conv2d(&x, &w, None, ConvConfig::default()), Err(Error::ShapeMismatch { .. })));
        let w = rand(&[4, 3, 5, 5], 2);
        assert!(matches!(conv2d(&x, &w, None, ConvConfig::default()), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn same_padding_preserves_extent_for_odd_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand(&[1, 2, 6, 9], 3);
        for k in [1, 3, 5, 7, 11, 21] {
            for kernel in [(k, 1), (1, k), (k, k)] {
                let conv = Conv2d::new(&mut rng, ConvSpec::depthwise(2, kernel)).unwrap();
                assert_eq!(conv.forward(&x).unwrap().shape(), x.shape());
            }
        }
    }
}
