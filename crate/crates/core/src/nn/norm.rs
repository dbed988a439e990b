use crate::accounting::{record, FlopKind};
use crate::error::{Error, Result};
use crate::tensor::{is_meta_mode, Function, Tensor};

pub const DEFAULT_EPS: f64 = 1e-6;

struct LayerNormFn {
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    n: usize,
    c: usize,
    spatial: usize,
}

impl Function for LayerNormFn {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x, &self.gamma, &self.beta]
    }

    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (c, s) = (self.c, self.spatial);
        let gamma = self.gamma.data();
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        let mut gx = self.x.requires_grad().then(|| vec![0.0; g.len()]);
        let inv_c = 1.0 / c as f64;
        let mut mean_dy = vec![0.0; s];
        let mut mean_dy_xhat = vec![0.0; s];
        for n in 0..self.n {
            let base = n * c * s;
            mean_dy.fill(0.0);
            mean_dy_xhat.fill(0.0);
            for ch in 0..c {
                let off = base + ch * s;
                let (gr, xr) = (&g[off..off + s], &self.xhat[off..off + s]);
                let mut sg = 0.0;
                let mut sgx = 0.0;
                for i in 0..s {
                    let dy = gr[i] * gamma[ch];
                    mean_dy[i] += dy;
                    mean_dy_xhat[i] += dy * xr[i];
                    sg += gr[i];
                    sgx += gr[i] * xr[i];
                }
                gbeta[ch] += sg;
                ggamma[ch] += sgx;
            }
            if let Some(gx) = gx.as_mut() {
                let rstd = &self.rstd[n * s..(n + 1) * s];
                for ch in 0..c {
                    let off = base + ch * s;
                    for i in 0..s {
                        let dy = g[off + i] * gamma[ch];
                        gx[off + i] = rstd[i]
                            * (dy - mean_dy[i] * inv_c - self.xhat[off + i] * mean_dy_xhat[i] * inv_c);
                    }
                }
            }
        }
        vec![
            gx,
            self.gamma.requires_grad().then_some(ggamma),
            self.beta.requires_grad().then_some(gbeta),
        ]
    }
}

/// Normalizes the channel vector at every `(n, h, w)` location to zero mean
/// and unit (biased) variance, then applies per-channel `gamma`/`beta`.
pub fn layer_norm_channel(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::mismatch("layer_norm", format!("input {shape:?} has no channel axis")));
    }
    let (n, c) = (shape[0], shape[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::mismatch(
            "layer_norm",
            format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
    }
    let spatial: usize = shape[2..].iter().product();
    record(FlopKind::Norm, 5 * x.numel() as u64);
    if is_meta_mode() {
        return Ok(Tensor::meta(shape.to_vec()));
    }

    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0; xd.len()];
    let mut rstd = vec![0.0; n * spatial];
    let mut out = vec![0.0; xd.len()];
    let inv_c = 1.0 / c as f64;
    let mut mean = vec![0.0; spatial];
    let mut var = vec![0.0; spatial];
    for b in 0..n {
        let base = b * c * spatial;
        mean.fill(0.0);
        var.fill(0.0);
        for ch in 0..c {
            let row = &xd[base + ch * spatial..base + (ch + 1) * spatial];
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for ch in 0..c {
            let row = &xd[base + ch * spatial..base + (ch + 1) * spatial];
            for i in 0..spatial {
                let d = row[i] - mean[i];
                var[i] += d * d;
            }
        }
        let r = &mut rstd[b * spatial..(b + 1) * spatial];
        for i in 0..spatial {
            r[i] = 1.0 / (var[i] * inv_c + eps).sqrt();
        }
        for ch in 0..c {
            let off = base + ch * spatial;
            for i in 0..spatial {
                let h = (xd[off + i] - mean[i]) * r[i];
                xhat[off + i] = h;
                out[off + i] = h * gd[ch] + bd[ch];
            }
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    Tensor::from_op(
        shape.to_vec(),
        out,
        LayerNormFn {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            rstd,
            n,
            c,
            spatial,
        },
    )
}

/// Channel layer normalization with learnable affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: Tensor::full(&[channels], 1.0)?.into_param(),
            beta: Tensor::zeros(&[channels])?.into_param(),
            eps: DEFAULT_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm_channel(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Init};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::new(shape, Init::Uniform { seed, lo: -2.0, hi: 2.0 }).unwrap()
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let x = Tensor::full(&[1, 4, 2, 2], 3.5).unwrap();
        let ln = LayerNorm::new(4).unwrap();
        let y = ln.forward(&x).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn unit_statistics_per_location() {
        let x = rand(&[2, 6, 3, 4], 1);
        let y = LayerNorm::new(6).unwrap().forward(&x).unwrap();
        let d = y.data();
        for n in 0..2 {
            for s in 0..12 {
                let vals: Vec<f64> = (0..6).map(|c| d[(n * 6 + c) * 12 + s]).collect();
                let mean = vals.iter().sum::<f64>() / 6.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
                assert!(mean.abs() < 1e-6, "{mean}");
                assert!((var - 1.0).abs() < 1e-5, "{var}");
            }
        }
    }

    #[test]
    fn gradients() {
        let x = rand(&[2, 5, 3, 3], 2);
        let gamma = rand(&[5], 3);
        let beta = rand(&[5], 4);
        let r = rand(&[2, 5, 3, 3], 5);
        let f = |x: &Tensor, g: &Tensor, b: &Tensor| layer_norm_channel(x, g, b, DEFAULT_EPS)?.mul(&r)?.sum();
        let ex = grad_check(|x| f(x, &gamma, &beta), &x, 1e-5).unwrap();
        let eg = grad_check(|g| f(&x, g, &beta), &gamma, 1e-5).unwrap();
        let eb = grad_check(|b| f(&x, &gamma, b), &beta, 1e-5).unwrap();
        assert!(ex < 1e-4 && eg < 1e-4 && eb < 1e-4, "{ex} {eg} {eb}");
    }

    #[test]
    fn rejects_mismatched_affine() {
        let x = rand(&[1, 3, 2, 2], 1);
        let g = Tensor::zeros(&[4]).unwrap();
        assert!(layer_norm_channel(&x, &g, &g, 1e-6).is_err());
    }
}
