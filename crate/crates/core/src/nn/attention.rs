//! Multi-head attention restricted to one spatial axis.
//!
//! For [`Axis::Columns`] every column `w` of every head is an independent
//! sequence of `H` tokens; for [`Axis::Rows`] every row is a sequence of `W`
//! tokens. Queries come from one feature map and keys/values from another,
//! which makes the same routine serve as self-attention (`q_src == kv_src`)
//! and as cross-attention.

use rand::Rng;

use super::{Conv2d, ConvSpec};
use crate::accounting::attention_scope;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Sequences run along the height: one sequence per column.
    Columns,
    /// Sequences run along the width: one sequence per row.
    Rows,
}

/// Head count and the four 1×1 projections (bias only on the output).
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub proj_q: Conv2d,
    pub proj_k: Conv2d,
    pub proj_v: Conv2d,
    pub proj_o: Conv2d,
}

impl AttentionParams {
    pub fn new(rng: &mut impl Rng, channels: usize, heads: usize) -> Result<AttentionParams> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{channels} channels are not divisible into {heads} heads"
            )));
        }
        Ok(AttentionParams {
            heads,
            proj_q: Conv2d::new(rng, ConvSpec::pointwise(channels, channels).no_bias())?,
            proj_k: Conv2d::new(rng, ConvSpec::pointwise(channels, channels).no_bias())?,
            proj_v: Conv2d::new(rng, ConvSpec::pointwise(channels, channels).no_bias())?,
            proj_o: Conv2d::new(rng, ConvSpec::pointwise(channels, channels))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj_q.weight.shape()[0]
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.proj_q.collect_params(&format!("{prefix}.q"), out);
        self.proj_k.collect_params(&format!("{prefix}.k"), out);
        self.proj_v.collect_params(&format!("{prefix}.v"), out);
        self.proj_o.collect_params(&format!("{prefix}.o"), out);
    }
}

/// Axis permutation taking `[N, heads, d, H, W]` to token-major
/// `[N, heads, seq_index, token, d]`.
fn to_tokens(axis: Axis) -> [usize; 5] {
    match axis {
        Axis::Columns => [0, 1, 4, 3, 2],
        Axis::Rows => [0, 1, 3, 4, 2],
    }
}

fn to_keys_transposed(axis: Axis) -> [usize; 5] {
    match axis {
        Axis::Columns => [0, 1, 4, 2, 3],
        Axis::Rows => [0, 1, 3, 2, 4],
    }
}

fn from_tokens(axis: Axis) -> [usize; 5] {
    match axis {
        Axis::Columns => [0, 1, 4, 3, 2],
        Axis::Rows => [0, 1, 4, 2, 3],
    }
}

/// Attention output plus the normalized attention weights, shaped
/// `[N·heads·sequences, tokens, tokens]` (query-major).
pub struct AttentionOutput {
    pub output: Tensor,
    pub weights: Tensor,
}

pub fn mhca_axis_detailed(
    q_src: &Tensor,
    kv_src: &Tensor,
    axis: Axis,
    ap: &AttentionParams,
) -> Result<AttentionOutput> {
    let shape = q_src.shape();
    if shape.len() != 4 || kv_src.shape() != shape {
        return Err(Error::Config(format!(
            "attention inputs must share a 4-D shape, got {:?} and {:?}",
            shape,
            kv_src.shape()
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let heads = ap.heads;
    if heads == 0 || c % heads != 0 || ap.channels() != c {
        return Err(Error::Config(format!(
            "{c} channels incompatible with {heads} heads over {}-channel projections",
            ap.channels()
        )));
    }
    let d = c / heads;
    let (seqs, tokens) = match axis {
        Axis::Columns => (w, h),
        Axis::Rows => (h, w),
    };
    let batch = n * heads * seqs;
    let split = [n, heads, d, h, w];

    let q = ap.proj_q.forward(q_src)?.reshape(&split)?;
    let k = ap.proj_k.forward(kv_src)?.reshape(&split)?;
    let v = ap.proj_v.forward(kv_src)?.reshape(&split)?;

    let q = q.permute(&to_tokens(axis))?.reshape(&[batch, tokens, d])?;
    let kt = k.permute(&to_keys_transposed(axis))?.reshape(&[batch, d, tokens])?;
    let v = v.permute(&to_tokens(axis))?.reshape(&[batch, tokens, d])?;

    let scores = attention_scope(|| q.matmul(&kt))?.scale(1.0 / (d as f64).sqrt())?;
    let weights = scores.softmax(2)?;
    let mixed = attention_scope(|| weights.matmul(&v))?;

    let token_shape = match axis {
        Axis::Columns => [n, heads, w, h, d],
        Axis::Rows => [n, heads, h, w, d],
    };
    let merged = mixed
        .reshape(&token_shape)?
        .permute(&from_tokens(axis))?
        .reshape(&[n, c, h, w])?;
    let output = ap.proj_o.forward(&merged)?;
    Ok(AttentionOutput { output, weights })
}

/// Multi-head attention along `axis` with queries from `q_src` and
/// keys/values from `kv_src`. Output shape equals the input shape.
pub fn mhca_axis(q_src: &Tensor, kv_src: &Tensor, axis: Axis, ap: &AttentionParams) -> Result<Tensor> {
    Ok(mhca_axis_detailed(q_src, kv_src, axis, ap)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bilinear_resize;
    use crate::tensor::{grad_check, Init};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::new(shape, Init::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
    }

    fn params(c: usize, heads: usize, seed: u64) -> AttentionParams {
        AttentionParams::new(&mut ChaCha8Rng::seed_from_u64(seed), c, heads).unwrap()
    }

    /// Applies a 1×1 projection at one pixel.
    fn project(conv: &Conv2d, x: &[f64], n: usize, c: usize, hw: usize, pix: usize) -> Vec<f64> {
        let w = conv.weight.data();
        (0..c)
            .map(|co| {
                let b = conv.bias.as_ref().map(|b| b.data()[co]).unwrap_or(0.0);
                b + (0..c).map(|ci| w[co * c + ci] * x[(n * c + ci) * hw + pix]).sum::<f64>()
            })
            .collect()
    }

    /// Brute-force attention: loops over sample, head, sequence, query, key.
    fn oracle(q_src: &Tensor, kv_src: &Tensor, axis: Axis, ap: &AttentionParams) -> Vec<f64> {
        let s = q_src.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let d = c / ap.heads;
        let hw = h * w;
        let (qd, kvd) = (q_src.to_vec(), kv_src.to_vec());
        let mut merged = vec![0.0; n * c * hw];
        let (seqs, tokens) = if axis == Axis::Columns { (w, h) } else { (h, w) };
        let pixel = |seq: usize, t: usize| if axis == Axis::Columns { t * w + seq } else { seq * w + t };
        for b in 0..n {
            let q: Vec<Vec<f64>> = (0..hw).map(|p| project(&ap.proj_q, &qd, b, c, hw, p)).collect();
            let k: Vec<Vec<f64>> = (0..hw).map(|p| project(&ap.proj_k, &kvd, b, c, hw, p)).collect();
            let v: Vec<Vec<f64>> = (0..hw).map(|p| project(&ap.proj_v, &kvd, b, c, hw, p)).collect();
            for head in 0..ap.heads {
                for seq in 0..seqs {
                    for i in 0..tokens {
                        let pi = pixel(seq, i);
                        let logits: Vec<f64> = (0..tokens)
                            .map(|j| {
                                let pj = pixel(seq, j);
                                (0..d).map(|e| q[pi][head * d + e] * k[pj][head * d + e]).sum::<f64>()
                                    / (d as f64).sqrt()
                            })
                            .collect();
                        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                        let total: f64 = exps.iter().sum();
                        for e in 0..d {
                            let ch = head * d + e;
                            merged[(b * c + ch) * hw + pi] = (0..tokens)
                                .map(|j| exps[j] / total * v[pixel(seq, j)][ch])
                                .sum();
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; n * c * hw];
        for b in 0..n {
            for p in 0..hw {
                let o = project(&ap.proj_o, &merged, b, c, hw, p);
                for ch in 0..c {
                    out[(b * c + ch) * hw + p] = o[ch];
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle() {
        for axis in [Axis::Columns, Axis::Rows] {
            for (n, c, heads, h, w) in [(1, 4, 2, 3, 3), (2, 8, 2, 6, 6), (1, 6, 3, 4, 5)] {
                let ap = params(c, heads, 7);
                let qs = rand(&[n, c, h, w], 1);
                let kv = rand(&[n, c, h, w], 2);
                let got = mhca_axis(&qs, &kv, axis, &ap).unwrap().to_vec();
                let want = oracle(&qs, &kv, axis, &ap);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-10, "{axis:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn single_token_sequences_pass_values_through() {
        let ap = params(4, 2, 3);
        let qs = rand(&[1, 4, 1, 5], 1);
        let kv = rand(&[1, 4, 1, 5], 2);
        let got = mhca_axis(&qs, &kv, Axis::Columns, &ap).unwrap();
        let want = ap.proj_o.forward(&ap.proj_v.forward(&kv).unwrap()).unwrap();
        for (a, b) in got.data().iter().zip(want.data().iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_keys_average_values() {
        let ap = params(4, 2, 5);
        // kv constant along each column → equal keys; values averaged per column.
        let col = rand(&[1, 4, 1, 3], 9);
        let kv = bilinear_resize(&col, 1, 3).unwrap();
        let kv = Tensor::concat_channels(&[kv]).unwrap();
        let kv = {
            let d = kv.to_vec();
            let mut full = vec![0.0; 4 * 5 * 3];
            for ch in 0..4 {
                for y in 0..5 {
                    for x in 0..3 {
                        full[(ch * 5 + y) * 3 + x] = d[ch * 3 + x];
                    }
                }
            }
            Tensor::from_vec(&[1, 4, 5, 3], full).unwrap()
        };
        let q1 = rand(&[1, 4, 5, 3], 11);
        let q2 = rand(&[1, 4, 5, 3], 12);
        let a = mhca_axis(&q1, &kv, Axis::Columns, &ap).unwrap().to_vec();
        let b = mhca_axis(&q2, &kv, Axis::Columns, &ap).unwrap().to_vec();
        let want = ap.proj_o.forward(&ap.proj_v.forward(&kv).unwrap()).unwrap().to_vec();
        for ((x, y), z) in a.iter().zip(&b).zip(&want) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let ap = params(8, 2, 4);
        let out = mhca_axis_detailed(&rand(&[2, 8, 5, 4], 1), &rand(&[2, 8, 5, 4], 2), Axis::Rows, &ap).unwrap();
        assert_eq!(out.weights.shape(), &[2 * 2 * 5, 4, 4]);
        for row in out.weights.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_heads_and_shapes() {
        assert!(matches!(AttentionParams::new(&mut ChaCha8Rng::seed_from_u64(0), 6, 4), Err(Error::Config(_))));
        let ap = params(4, 2, 1);
        let a = rand(&[1, 4, 3, 3], 1);
        let b = rand(&[1, 4, 3, 2], 2);
        assert!(matches!(mhca_axis(&a, &b, Axis::Rows, &ap), Err(Error::Config(_))));
        let wrong_c = rand(&[1, 6, 3, 3], 1);
        assert!(matches!(mhca_axis(&wrong_c, &wrong_c, Axis::Rows, &ap), Err(Error::Config(_))));
    }

    #[test]
    fn gradients_wrt_both_sources() {
        let ap = params(4, 2, 8);
        let qs = rand(&[1, 4, 3, 4], 1);
        let kv = rand(&[1, 4, 3, 4], 2);
        let r = rand(&[1, 4, 3, 4], 3);
        for axis in [Axis::Columns, Axis::Rows] {
            let eq = grad_check(|q| mhca_axis(q, &kv, axis, &ap)?.mul(&r)?.sum(), &qs, 1e-5).unwrap();
            let ek = grad_check(|k| mhca_axis(&qs, k, axis, &ap)?.mul(&r)?.sum(), &kv, 1e-5).unwrap();
            assert!(eq < 1e-6 && ek < 1e-6, "{axis:?}: {eq} {ek}");
        }
    }

    fn permute_columns(t: &Tensor, perm: &[usize]) -> Tensor {
        let s = t.shape().to_vec();
        let w = s[3];
        let d = t.to_vec();
        let mut out = vec![0.0; d.len()];
        for (row_idx, row) in d.chunks(w).enumerate() {
            for (x, &src) in perm.iter().enumerate() {
                out[row_idx * w + x] = row[src];
            }
        }
        Tensor::from_vec(&s, out).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn column_attention_commutes_with_column_permutation(
            seed in 0u64..1000,
            perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let ap = params(4, 2, seed);
            let qs = rand(&[1, 4, 3, 5], seed + 1);
            let kv = rand(&[1, 4, 3, 5], seed + 2);
            let direct = permute_columns(&mhca_axis(&qs, &kv, Axis::Columns, &ap).unwrap(), &perm);
            let moved = mhca_axis(&permute_columns(&qs, &perm), &permute_columns(&kv, &perm), Axis::Columns, &ap).unwrap();
            for (a, b) in direct.data().iter().zip(moved.data().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
