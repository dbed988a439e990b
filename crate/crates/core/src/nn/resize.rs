use crate::accounting::{record, FlopKind};
use crate::error::{Error, Result};
use crate::tensor::{is_meta_mode, Function, Tensor};

/// Two source taps and their weights for one output coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Half-pixel-center sampling: `s = (d + 0.5)·(in/out) − 0.5`, clamped to
/// `[0, in − 1]`.
pub(crate) fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            let frac = s - lo as f64;
            Tap { lo, hi, w_lo: 1.0 - frac, w_hi: frac }
        })
        .collect()
}

struct ResizeFn {
    x: Tensor,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
    planes: usize,
    h: usize,
    w: usize,
}

impl Function for ResizeFn {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }

    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (h, w) = (self.h, self.w);
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut gx = vec![0.0; self.planes * h * w];
        for p in 0..self.planes {
            let src = &mut gx[p * h * w..(p + 1) * h * w];
            let gp = &g[p * oh * ow..(p + 1) * oh * ow];
            for (oy, r) in self.rows.iter().enumerate() {
                for (ox, c) in self.cols.iter().enumerate() {
                    let v = gp[oy * ow + ox];
                    src[r.lo * w + c.lo] += v * r.w_lo * c.w_lo;
                    src[r.lo * w + c.hi] += v * r.w_lo * c.w_hi;
                    src[r.hi * w + c.lo] += v * r.w_hi * c.w_lo;
                    src[r.hi * w + c.hi] += v * r.w_hi * c.w_hi;
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Bilinear resampling of the two trailing axes of `x: [N, C, H, W]`.
/// Resizing to the input size returns the input values unchanged.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::mismatch("bilinear_resize", format!("input {shape:?} must be 4-D")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape {
            shape: vec![out_h, out_w],
            reason: "resize target must be positive".into(),
        });
    }
    let (h, w) = (shape[2], shape[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let planes = shape[0] * shape[1];
    let out_shape = vec![shape[0], shape[1], out_h, out_w];
    record(FlopKind::Resize, 7 * (planes * out_h * out_w) as u64);
    if is_meta_mode() {
        return Ok(Tensor::meta(out_shape));
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for r in &rows {
            let (top, bottom) = (&src[r.lo * w..(r.lo + 1) * w], &src[r.hi * w..(r.hi + 1) * w]);
            for c in &cols {
                let upper = top[c.lo] * c.w_lo + top[c.hi] * c.w_hi;
                let lower = bottom[c.lo] * c.w_lo + bottom[c.hi] * c.w_hi;
                out.push(upper * r.w_lo + lower * r.w_hi);
            }
        }
    }
    drop(xd);
    Tensor::from_op(out_shape, out, ResizeFn { x: x.clone(), rows, cols, planes, h, w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Init};

    /// Direct evaluation of the sampling formula for one output pixel.
    fn formula(src: &[f64], h: usize, w: usize, oh: usize, ow: usize, y: usize, x: usize) -> f64 {
        let coord = |d: usize, input: usize, output: usize| {
            let s = (d as f64 + 0.5) * input as f64 / output as f64 - 0.5;
            s.max(0.0).min((input - 1) as f64)
        };
        let (sy, sx) = (coord(y, h, oh), coord(x, w, ow));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        src[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
            + src[y0 * w + x1] * (1.0 - fy) * fx
            + src[y1 * w + x0] * fy * (1.0 - fx)
            + src[y1 * w + x1] * fy * fx
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::new(&[1, 2, 3, 5], Init::Uniform { seed: 1, lo: -1.0, hi: 1.0 }).unwrap();
        let y = bilinear_resize(&x, 3, 5).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn constant_is_preserved() {
        let x = Tensor::full(&[1, 1, 3, 3], 0.7).unwrap();
        for (oh, ow) in [(1, 1), (5, 7), (12, 2)] {
            let y = bilinear_resize(&x, oh, ow).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn two_by_two_to_four_by_four() {
        let src = [0.0, 1.0, 2.0, 3.0];
        let x = Tensor::from_vec(&[1, 1, 2, 2], src.to_vec()).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap().to_vec();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[15], 3.0);
        for yy in 0..4 {
            for xx in 0..4 {
                let want = formula(&src, 2, 2, 4, 4, yy, xx);
                assert!((y[yy * 4 + xx] - want).abs() < 1e-15);
            }
        }
        // inner pixel (1,1) samples (0.25, 0.25)
        assert!((y[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn downsampling_matches_formula() {
        let x = Tensor::new(&[1, 1, 7, 9], Init::Uniform { seed: 4, lo: -1.0, hi: 1.0 }).unwrap();
        let y = bilinear_resize(&x, 3, 4).unwrap().to_vec();
        let src = x.to_vec();
        for yy in 0..3 {
            for xx in 0..4 {
                assert!((y[yy * 4 + xx] - formula(&src, 7, 9, 3, 4, yy, xx)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradients_up_and_down() {
        for (h, w, oh, ow) in [(2, 3, 8, 12), (7, 5, 3, 4), (1, 1, 4, 4)] {
            let x = Tensor::new(&[2, 2, h, w], Init::Uniform { seed: 5, lo: -1.0, hi: 1.0 }).unwrap();
            let r = Tensor::new(&[2, 2, oh, ow], Init::Uniform { seed: 6, lo: -1.0, hi: 1.0 }).unwrap();
            let err = grad_check(|x| bilinear_resize(x, oh, ow)?.mul(&r)?.sum(), &x, 1e-5).unwrap();
            assert!(err < 1e-8, "{err}");
        }
    }
}
