//! Pixel-wise cross-entropy with the stabilized log-sum-exp form.

use serde::{Deserialize, Serialize};

use crate::accounting::{record, FlopKind};
use crate::error::{Error, Result};
use crate::tensor::{is_meta_mode, Function, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// One logit channel, sigmoid cross-entropy against labels {0, 1}.
    Binary,
    /// K logit channels, softmax cross-entropy against labels `< K`.
    Multiclass,
}

impl LossMode {
    pub fn for_classes(num_classes: usize) -> LossMode {
        if num_classes == 1 {
            LossMode::Binary
        } else {
            LossMode::Multiclass
        }
    }
}

struct CrossEntropyFn {
    logits: Tensor,
    /// d loss / d logits, already divided by the pixel count.
    grad: Vec<f64>,
}

impl Function for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.logits]
    }

    fn backward(&self, g: &[f64], _out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.grad.iter().map(|v| v * g[0]).collect())]
    }
}

/// Mean over pixels of the per-pixel cross-entropy. `mask` holds one label
/// per `(n, h, w)` in row-major order.
pub fn cross_entropy_loss(logits: &Tensor, mask: &[u8], mode: LossMode) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::mismatch("cross_entropy", format!("logits {s:?} must be [N, K, H, W]")));
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    if mask.len() != n * hw {
        return Err(Error::mismatch("cross_entropy", format!("{} labels for logits {s:?}", mask.len())));
    }
    if mode == LossMode::Binary && k != 1 {
        return Err(Error::mismatch("cross_entropy", format!("binary loss needs 1 channel, got {k}")));
    }
    let classes = if mode == LossMode::Binary { 2 } else { k };
    if let Some(&l) = mask.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
    }
    record(FlopKind::Loss, 4 * logits.numel() as u64);
    if is_meta_mode() {
        return Ok(Tensor::meta(vec![1]));
    }
    let pixels = (n * hw) as f64;
    let z = logits.data();
    let mut grad = vec![0.0; z.len()];
    let mut total = 0.0;
    match mode {
        LossMode::Binary => {
            for (i, (&zi, &y)) in z.iter().zip(mask).enumerate() {
                let y = y as f64;
                total += zi.max(0.0) - zi * y + (-zi.abs()).exp().ln_1p();
                let sig = if zi >= 0.0 { 1.0 / (1.0 + (-zi).exp()) } else { zi.exp() / (1.0 + zi.exp()) };
                grad[i] = (sig - y) / pixels;
            }
        }
        LossMode::Multiclass => {
            for b in 0..n {
                let base = b * k * hw;
                for p in 0..hw {
                    let at = |c: usize| base + c * hw + p;
                    let m = (0..k).map(|c| z[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = (0..k).map(|c| (z[at(c)] - m).exp()).sum();
                    let label = mask[b * hw + p] as usize;
                    total += (m - z[at(label)]) + sum.ln();
                    for c in 0..k {
                        let prob = (z[at(c)] - m).exp() / sum;
                        grad[at(c)] = (prob - if c == label { 1.0 } else { 0.0 }) / pixels;
                    }
                }
            }
        }
    }
    drop(z);
    Tensor::from_op(vec![1], vec![total / pixels], CrossEntropyFn { logits: logits.clone(), grad })
}

/// Per-pixel predicted labels: `sigmoid > 0.5` (logit > 0) for one
/// channel, argmax otherwise (first maximum wins).
pub fn predict_labels(logits: &Tensor) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::mismatch("predict_labels", format!("logits {s:?} must be [N, K, H, W]")));
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let z = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let at = |c: usize| z[(b * k + c) * hw + p];
            let label = if k == 1 {
                u8::from(at(0) > 0.0)
            } else {
                (1..k).fold(0, |best, c| if at(c) > at(best) { c } else { best }) as u8
            };
            out.push(label);
        }
    }
    Ok(out)
}
