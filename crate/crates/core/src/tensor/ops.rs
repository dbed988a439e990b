use super::{gemm_nn, gemm_nt, gemm_tn, is_meta_mode, Function, Tensor};
use crate::accounting::{record, FlopKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` has shape `[C]` and scales/shifts axis 1 of `a`.
    Channel { channels: usize, inner: usize },
}

struct Binary {
    op: BinaryOp,
    a: Tensor,
    b: Tensor,
    mode: Broadcast,
}

impl Function for Binary {
    fn name(&self) -> &'static str {
        match self.op {
            BinaryOp::Add => "add",
            BinaryOp::Mul => "mul",
        }
    }

    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.a, &self.b]
    }

    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let need_a = self.a.requires_grad();
        let need_b = self.b.requires_grad();
        match (self.op, self.mode) {
            (BinaryOp::Add, Broadcast::Same) => {
                vec![need_a.then(|| g.to_vec()), need_b.then(|| g.to_vec())]
            }
            (BinaryOp::Mul, Broadcast::Same) => {
                let a = self.a.data();
                let b = self.b.data();
                let ga = need_a.then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect());
                let gb = need_b.then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }
            (BinaryOp::Add, Broadcast::Channel { channels, inner }) => {
                let gb = need_b.then(|| {
                    let mut gb = vec![0.0; channels];
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        gb[i % channels] += chunk.iter().sum::<f64>();
                    }
                    gb
                });
                vec![need_a.then(|| g.to_vec()), gb]
            }
            (BinaryOp::Mul, Broadcast::Channel { channels, inner }) => {
                let a = self.a.data();
                let b = self.b.data();
                let ga = need_a.then(|| {
                    let mut ga = g.to_vec();
                    for (i, chunk) in ga.chunks_mut(inner).enumerate() {
                        let s = b[i % channels];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    ga
                });
                let gb = need_b.then(|| {
                    let mut gb = vec![0.0; channels];
                    for (i, (gc, ac)) in g.chunks(inner).zip(a.chunks(inner)).enumerate() {
                        gb[i % channels] += gc.iter().zip(ac).map(|(g, a)| g * a).sum::<f64>();
                    }
                    gb
                });
                vec![ga, gb]
            }
        }
    }
}

struct Scale {
    x: Tensor,
    factor: f64,
}

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }
    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.factor).collect())]
    }
}

struct MatMul {
    a: Tensor,
    b: Tensor,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl Function for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.a, &self.b]
    }
    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = self.a.data();
        let b = self.b.data();
        let ga = self.a.requires_grad().then(|| {
            let mut ga = vec![0.0; self.batch * m * k];
            for i in 0..self.batch {
                gemm_nt(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    &b[i * k * n..(i + 1) * k * n],
                    &mut ga[i * m * k..(i + 1) * m * k],
                );
            }
            ga
        });
        let gb = self.b.requires_grad().then(|| {
            let mut gb = vec![0.0; self.batch * k * n];
            for i in 0..self.batch {
                gemm_tn(
                    k,
                    m,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    &g[i * m * n..(i + 1) * m * n],
                    &mut gb[i * k * n..(i + 1) * k * n],
                );
            }
            gb
        });
        vec![ga, gb]
    }
}

struct Softmax {
    x: Tensor,
    outer: usize,
    len: usize,
    inner: usize,
}

impl Function for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }
    fn backward(&self, g: &[f64], y: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (len, inner) = (self.len, self.inner);
        let mut gx = vec![0.0; g.len()];
        for o in 0..self.outer {
            let base = o * len * inner;
            for i in 0..inner {
                let mut dot = 0.0;
                for j in 0..len {
                    let idx = base + j * inner + i;
                    dot += g[idx] * y[idx];
                }
                for j in 0..len {
                    let idx = base + j * inner + i;
                    gx[idx] = y[idx] * (g[idx] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

struct Concat {
    parts: Vec<Tensor>,
    outer: usize,
    /// Per-part contiguous block length (channels × inner).
    blocks: Vec<usize>,
}

impl Function for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        self.parts.iter().collect()
    }
    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let row: usize = self.blocks.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.parts.len());
        for (part, &block) in self.parts.iter().zip(&self.blocks) {
            if part.requires_grad() {
                let mut gp = Vec::with_capacity(self.outer * block);
                for o in 0..self.outer {
                    let start = o * row + offset;
                    gp.extend_from_slice(&g[start..start + block]);
                }
                grads.push(Some(gp));
            } else {
                grads.push(None);
            }
            offset += block;
        }
        grads
    }
}

struct Reshape {
    x: Tensor,
}

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }
    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct Permute {
    x: Tensor,
    axes: Vec<usize>,
}

impl Function for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }
    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut inverse = vec![0; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape: Vec<usize> = self.axes.iter().map(|&a| self.x.shape()[a]).collect();
        vec![Some(permute_values(g, &out_shape, &inverse))]
    }
}

struct Sum {
    x: Tensor,
    factor: f64,
}

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }
    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.factor; self.x.numel()])]
    }
}

struct Gelu {
    x: Tensor,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

impl Function for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x]
    }
    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.x.data();
        vec![Some(g.iter().zip(x.iter()).map(|(g, &x)| g * gelu_grad(x)).collect())]
    }
}

/// Copies `x` (shape `shape`) into the layout given by `axes`.
pub(crate) fn permute_values(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| x[base + j * inner_stride]));
        }
        // advance all but the innermost axis
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Mul => "mul",
        };
        let mode = if self.shape() == other.shape() {
            Broadcast::Same
        } else if other.rank() == 1 && self.rank() >= 2 && self.shape()[1] == other.shape()[0] {
            Broadcast::Channel {
                channels: other.shape()[0],
                inner: self.shape()[2..].iter().product(),
            }
        } else {
            return Err(Error::mismatch(
                name,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        };
        record(FlopKind::Elementwise, self.numel() as u64);
        if is_meta_mode() {
            return Ok(Tensor::meta(self.shape().to_vec()));
        }
        let data = {
            let a = self.data();
            let b = other.data();
            match mode {
                Broadcast::Same => match op {
                    BinaryOp::Add => a.iter().zip(b.iter()).map(|(x, y)| x + y).collect(),
                    BinaryOp::Mul => a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
                },
                Broadcast::Channel { channels, inner } => {
                    let mut out = a.to_vec();
                    for (i, chunk) in out.chunks_mut(inner).enumerate() {
                        let v = b[i % channels];
                        match op {
                            BinaryOp::Add => chunk.iter_mut().for_each(|x| *x += v),
                            BinaryOp::Mul => chunk.iter_mut().for_each(|x| *x *= v),
                        }
                    }
                    out
                }
            }
        };
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Binary { op, a: self.clone(), b: other.clone(), mode },
        )
    }

    /// Elementwise sum. `other` may also be a `[C]` vector added per channel.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryOp::Add)
    }

    /// Elementwise product. `other` may also be a `[C]` vector scaling each channel.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn ew_binary(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        self.binary(other, op)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        record(FlopKind::Elementwise, self.numel() as u64);
        if is_meta_mode() {
            return Ok(Tensor::meta(self.shape().to_vec()));
        }
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(self.shape().to_vec(), data, Scale { x: self.clone(), factor })
    }

    /// Batched matrix product over all leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(Error::mismatch("matmul", format!("ranks of {sa:?} and {sb:?}")));
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(Error::mismatch("matmul", format!("inner extents {sa:?} · {sb:?}")));
        }
        if sa[..r - 2] != sb[..r - 2] {
            return Err(Error::mismatch("matmul", format!("batch extents {sa:?} · {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        record(FlopKind::Matmul, 2 * (batch * m * n * k) as u64);
        if is_meta_mode() {
            return Ok(Tensor::meta(shape));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let a = self.data();
            let b = other.data();
            for i in 0..batch {
                gemm_nn(
                    m,
                    k,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Tensor::from_op(
            shape,
            out,
            MatMul { a: self.clone(), b: other.clone(), batch, m, k, n },
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::mismatch("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        record(FlopKind::Softmax, 3 * self.numel() as u64);
        if is_meta_mode() {
            return Ok(Tensor::meta(shape.to_vec()));
        }
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..inner {
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(x[base + j * inner + i]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let idx = base + j * inner + i;
                    let e = (x[idx] - max).exp();
                    y[idx] = e;
                    total += e;
                }
                for j in 0..len {
                    y[base + j * inner + i] /= total;
                }
            }
        }
        drop(x);
        Tensor::from_op(shape.to_vec(), y, Softmax { x: self.clone(), outer, len, inner })
    }

    /// Concatenation along axis 1 (channels).
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::mismatch("concat", "no tensors to concatenate"))?;
        if first.rank() < 2 {
            return Err(Error::mismatch("concat", format!("rank of {:?}", first.shape())));
        }
        for p in parts {
            let same_rank = p.rank() == first.rank();
            if !same_rank || p.shape()[0] != first.shape()[0] || p.shape()[2..] != first.shape()[2..] {
                return Err(Error::mismatch(
                    "concat",
                    format!("{:?} vs {:?}", p.shape(), first.shape()),
                ));
            }
        }
        if parts.len() == 1 {
            return Ok(first.clone());
        }
        let outer = first.shape()[0];
        let inner: usize = first.shape()[2..].iter().product();
        let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[1] * inner).collect();
        let mut shape = first.shape().to_vec();
        shape[1] = parts.iter().map(|p| p.shape()[1]).sum();
        if is_meta_mode() {
            return Ok(Tensor::meta(shape));
        }
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (p, &block) in parts.iter().zip(&blocks) {
                out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        Tensor::from_op(shape, out, Concat { parts: parts.to_vec(), outer, blocks })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        super::validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::mismatch(
                "reshape",
                format!("{:?} into {:?}", self.shape(), shape),
            ));
        }
        if is_meta_mode() {
            return Ok(Tensor::meta(shape.to_vec()));
        }
        Tensor::from_op(shape.to_vec(), self.to_vec(), Reshape { x: self.clone() })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::mismatch(
                "permute",
                format!("axes {axes:?} for shape {:?}", self.shape()),
            ));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        if is_meta_mode() {
            return Ok(Tensor::meta(shape));
        }
        let data = permute_values(&self.data(), self.shape(), axes);
        Tensor::from_op(shape, data, Permute { x: self.clone(), axes: axes.to_vec() })
    }

    pub fn sum(&self) -> Result<Tensor> {
        record(FlopKind::Elementwise, self.numel() as u64);
        if is_meta_mode() {
            return Ok(Tensor::meta(vec![1]));
        }
        let s = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Sum { x: self.clone(), factor: 1.0 })
    }

    pub fn mean(&self) -> Result<Tensor> {
        record(FlopKind::Elementwise, self.numel() as u64);
        if is_meta_mode() {
            return Ok(Tensor::meta(vec![1]));
        }
        let factor = 1.0 / self.numel() as f64;
        let s = self.data().iter().sum::<f64>() * factor;
        Tensor::from_op(vec![1], vec![s], Sum { x: self.clone(), factor })
    }

    /// Gaussian-error linear unit, `x·Φ(x)`.
    pub fn gelu(&self) -> Result<Tensor> {
        record(FlopKind::Activation, 8 * self.numel() as u64);
        if is_meta_mode() {
            return Ok(Tensor::meta(self.shape().to_vec()));
        }
        let data = self.data().iter().map(|&v| gelu(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Gelu { x: self.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Init};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::new(shape, Init::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn add_and_mul_values() {
        assert_eq!(t(&[2], &[1.0, 2.0]).add(&t(&[2], &[3.0, 4.0])).unwrap().to_vec(), vec![4.0, 6.0]);
        assert_eq!(t(&[2], &[1.0, 2.0]).mul(&t(&[2], &[3.0, 4.0])).unwrap().to_vec(), vec![3.0, 8.0]);
    }

    #[test]
    fn mul_by_zeros_annihilates_value_and_grad() {
        let x = rand(&[5], 1).into_param();
        let z = Tensor::zeros(&[5]).unwrap();
        let y = x.mul(&z).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        y.sum().unwrap().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let err = t(&[2], &[1.0, 2.0]).add(&t(&[3], &[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "add", .. }));
        let err = rand(&[2, 3], 1).matmul(&rand(&[2, 3], 2)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn channel_broadcast() {
        let x = t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 100.0]);
        assert_eq!(x.add(&b).unwrap().to_vec(), vec![11.0, 12.0, 103.0, 104.0]);
        assert_eq!(x.mul(&b).unwrap().to_vec(), vec![10.0, 20.0, 300.0, 400.0]);
        // anything but [C] over axis 1 is rejected
        assert!(x.add(&t(&[2], &[1.0, 1.0]).reshape(&[1, 2]).unwrap()).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let m = rand(&[3, 3], 4);
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 4] = 1.0);
        assert_eq!(t(&[3, 3], &eye).matmul(&m).unwrap().to_vec(), m.to_vec());

        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_gradients() {
        let b = rand(&[2, 4, 3], 9);
        let err = grad_check(|a| a.matmul(&b)?.mul(&rand(&[2, 5, 3], 3))?.sum(), &rand(&[2, 5, 4], 8), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let a = rand(&[2, 5, 4], 8);
        let err = grad_check(|b| a.matmul(b)?.mul(&rand(&[2, 5, 3], 3))?.sum(), &b, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let y = t(&[4], &[0.3; 4]).softmax(0).unwrap().to_vec();
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let y = t(&[2], &[0.0, 2f64.ln()]).softmax(0).unwrap().to_vec();
        assert!((y[0] - 1.0 / 3.0).abs() < 1e-15 && (y[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let y = t(&[3], &[1000.0, 1001.0, 999.0]).softmax(0).unwrap().to_vec();
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradients_along_middle_axis() {
        let w = rand(&[2, 3, 4], 11);
        let err = grad_check(|x| x.softmax(1)?.mul(&w)?.sum(), &rand(&[2, 3, 4], 10), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn concat_widths_and_grads() {
        let parts: Vec<Tensor> = [64, 160, 256]
            .iter()
            .map(|&c| Tensor::zeros(&[1, c, 2, 2]).unwrap())
            .collect();
        assert_eq!(Tensor::concat_channels(&parts).unwrap().shape(), &[1, 480, 2, 2]);

        let one = rand(&[1, 3, 2, 2], 1);
        assert_eq!(Tensor::concat_channels(std::slice::from_ref(&one)).unwrap().to_vec(), one.to_vec());

        assert!(Tensor::concat_channels(&[rand(&[1, 2, 2, 2], 1), rand(&[1, 2, 3, 2], 2)]).is_err());

        let other = rand(&[2, 2, 3, 3], 5);
        let w = rand(&[2, 5, 3, 3], 6);
        let err = grad_check(
            |x| Tensor::concat_channels(&[x.clone(), other.clone()])?.mul(&w)?.sum(),
            &rand(&[2, 3, 3, 3], 4),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let first = rand(&[2, 3, 3, 3], 4);
        let err = grad_check(
            |x| Tensor::concat_channels(&[first.clone(), x.clone()])?.mul(&w)?.sum(),
            &other,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn permute_round_trip_and_grad() {
        let x = rand(&[2, 3, 4, 5], 3);
        let y = x.permute(&[0, 3, 1, 2]).unwrap();
        assert_eq!(y.shape(), &[2, 5, 3, 4]);
        let back = y.permute(&[0, 2, 3, 1]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        // element check: y[n, w, c, h] == x[n, c, h, w]
        assert_eq!(y.data()[((1 * 5 + 4) * 3 + 2) * 4 + 3], x.data()[((1 * 3 + 2) * 4 + 3) * 5 + 4]);

        let w = rand(&[2, 5, 3, 4], 7);
        let err = grad_check(|x| x.permute(&[0, 3, 1, 2])?.mul(&w)?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        assert!(x.permute(&[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn gelu_values_and_grad() {
        let y = t(&[3], &[0.0, 1.0, -1.0]).gelu().unwrap().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((y[2] + 0.158_655_253_931_457_05).abs() < 1e-12);
        let err = grad_check(|x| x.gelu()?.sum(), &rand(&[10], 2).scale(3.0).unwrap(), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn mean_grad() {
        let x = rand(&[4], 1).into_param();
        x.mean().unwrap().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![0.25; 4]);
    }
}
