//! FLOP and parameter accounting.
//!
//! Every tensor op reports an analytic FLOP count to a per-thread tally while
//! one is active ([`count_flops`]). Conventions:
//! - convolution: `2·N·C_out·H'·W'·(C_in/groups)·kH·kW`;
//! - matrix product: `2·m·n·k` per batch entry;
//! - elementwise ops: one per output element;
//! - softmax: three per element, layer norm: five, bilinear resize: seven,
//!   activation: eight.
//!
//! Ops executed inside [`attention_scope`] are additionally tallied as
//! attention-core FLOPs (the score and value products).

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;
use crate::model::McaNet;
use crate::tensor::{meta_mode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopKind {
    Conv,
    Matmul,
    Elementwise,
    Norm,
    Resize,
    Softmax,
    Activation,
    Loss,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopTally {
    pub total: u64,
    pub attention: u64,
    pub by_kind: BTreeMap<FlopKind, u64>,
}

thread_local! {
    static TALLY: RefCell<Option<FlopTally>> = const { RefCell::new(None) };
    static ATTENTION_DEPTH: Cell<u32> = const { Cell::new(0) };
}

pub(crate) fn record(kind: FlopKind, flops: u64) {
    TALLY.with(|t| {
        if let Some(tally) = t.borrow_mut().as_mut() {
            tally.total += flops;
            *tally.by_kind.entry(kind).or_default() += flops;
            if ATTENTION_DEPTH.with(|d| d.get()) > 0 {
                tally.attention += flops;
            }
        }
    });
}

/// Runs `f` and returns the FLOPs its ops reported.
pub fn count_flops<T>(f: impl FnOnce() -> T) -> (T, FlopTally) {
    let prev = TALLY.with(|t| t.replace(Some(FlopTally::default())));
    let out = f();
    let tally = TALLY.with(|t| t.replace(prev)).unwrap_or_default();
    (out, tally)
}

/// Marks ops run inside `f` as attention-core work.
pub fn attention_scope<T>(f: impl FnOnce() -> T) -> T {
    ATTENTION_DEPTH.with(|d| d.set(d.get() + 1));
    let out = f();
    ATTENTION_DEPTH.with(|d| d.set(d.get() - 1));
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelStats {
    pub params: u64,
    pub flops: FlopTally,
}

/// Parameter count and the FLOPs of one forward pass on a single
/// `input_h × input_w` image. The pass runs on shape-only tensors.
pub fn model_stats(model: &McaNet, input_h: usize, input_w: usize) -> Result<ModelStats> {
    let params = model.param_count() as u64;
    let shape = vec![1, model.spec.encoder.in_channels, input_h, input_w];
    crate::tensor::validate_shape(&shape)?;
    let (out, flops) = count_flops(|| meta_mode(|| model.forward(&Tensor::meta(shape))));
    out?;
    Ok(ModelStats { params, flops })
}

/// Score and value product FLOPs that dense self-attention over all
/// `h·w` tokens would spend in place of each of `calls` axial attention
/// calls on an `[n, channels, h, w]` map split into `heads` heads.
pub fn dense_attention_flops(n: usize, channels: usize, heads: usize, h: usize, w: usize, calls: usize) -> Result<u64> {
    let d = channels / heads.max(1);
    let tokens = h * w;
    let (_, tally) = count_flops(|| {
        meta_mode(|| -> Result<()> {
            for _ in 0..calls {
                let q = Tensor::meta(vec![n, heads, tokens, d]);
                let kt = Tensor::meta(vec![n, heads, d, tokens]);
                let v = Tensor::meta(vec![n, heads, tokens, d]);
                attention_scope(|| -> Result<()> {
                    let scores = q.matmul(&kt)?;
                    scores.matmul(&v)?;
                    Ok(())
                })?;
            }
            Ok(())
        })
    });
    Ok(tally.attention)
}
