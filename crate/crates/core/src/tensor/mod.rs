//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a reference-counted node. Operations executed while grad
//! mode is on and at least one input requires a gradient attach a
//! [`Function`] to their output, which keeps the inputs alive. The resulting
//! graph is the record of executed operations: every node carries a creation
//! index from a per-thread counter, so sorting reachable nodes by that index
//! reproduces execution order, and reversing it gives the backward schedule.
//!
//! Three per-thread modes affect operations:
//! - grad mode ([`no_grad`]): when off, no graph is recorded;
//! - precision ([`with_precision`]): in [`Precision::F32`] every op output is
//!   rounded to the nearest single-precision value;
//! - meta mode ([`meta_mode`]): ops only compute shapes and report FLOPs,
//!   returning data-less tensors. Used for model accounting at full size.

mod gemm;
pub mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub(crate) use gemm::{gemm_nn, gemm_nt, gemm_tn};
pub use gradcheck::grad_check;

/// Arithmetic precision applied to op outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
    static META: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with every op output rounded to `precision`.
pub fn with_precision<T>(precision: Precision, f: impl FnOnce() -> T) -> T {
    let prev = PRECISION.with(|p| p.replace(precision));
    let out = f();
    PRECISION.with(|p| p.set(prev));
    out
}

pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

/// Runs `f` in shape-only mode. Gradients are never recorded.
pub fn meta_mode<T>(f: impl FnOnce() -> T) -> T {
    let prev = META.with(|m| m.replace(true));
    let out = no_grad(f);
    META.with(|m| m.set(prev));
    out
}

pub fn is_meta_mode() -> bool {
    META.with(|m| m.get())
}

pub(crate) fn round_to_precision(values: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in values.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Backward rule of a recorded operation.
pub trait Function {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<&Tensor>;

    /// Returns one gradient per input (in `inputs()` order); `None` where the
    /// input needs no gradient.
    fn backward(&self, grad_out: &[f64], output: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    meta: bool,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<Box<dyn Function>>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

/// Initializer for [`Tensor::new`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { seed: u64, lo: f64, hi: f64 },
}

/// Statistics from one backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardReport {
    pub nodes_visited: usize,
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive and rank at least 1".into(),
        });
    }
    Ok(())
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            meta: false,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        }))
    }

    pub fn new(shape: &[usize], init: Init) -> Result<Tensor> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform { seed, lo, hi } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                uniform_values(&mut rng, n, lo, hi)
            }
        };
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, Init::Zeros)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Tensor::new(shape, Init::Constant(value))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    /// Tensor drawn from `rng`, uniform in `[lo, hi)`.
    pub fn uniform_from(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Tensor::leaf(shape.to_vec(), uniform_values(rng, n, lo, hi), false))
    }

    /// Shape-only tensor produced in meta mode.
    pub(crate) fn meta(shape: Vec<usize>) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(Vec::new()),
            meta: true,
            requires_grad: false,
            grad: RefCell::new(None),
            grad_fn: None,
        }))
    }

    /// Builds an op output, attaching `f` when a gradient is needed.
    pub(crate) fn from_op<F: Function + 'static>(
        shape: Vec<usize>,
        mut data: Vec<f64>,
        f: F,
    ) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: f.name() });
        }
        round_to_precision(&mut data);
        let requires_grad = grad_enabled() && f.inputs().iter().any(|t| t.requires_grad());
        let grad_fn: Option<Box<dyn Function>> = if requires_grad { Some(Box::new(f)) } else { None };
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            meta: false,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn,
        })))
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// A new leaf with the same values that records gradients.
    pub fn into_param(self) -> Tensor {
        let data = self.0.data.borrow().clone();
        Tensor::leaf(self.0.shape.clone(), data, true)
    }

    /// A new leaf with the same values, detached from any graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.borrow().clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_meta(&self) -> bool {
        self.0.meta
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    /// Overwrites the values of a leaf in place (optimizer updates, loading).
    pub fn assign(&self, values: &[f64]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Contract("assign on a non-leaf tensor".into()));
        }
        let mut data = self.0.data.borrow_mut();
        if data.len() != values.len() {
            return Err(Error::mismatch(
                "assign",
                format!("{} values into tensor of {}", values.len(), data.len()),
            ));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    /// In-place update of a leaf's values.
    pub fn update(&self, f: impl FnOnce(&mut [f64])) {
        debug_assert!(self.is_leaf());
        f(&mut self.0.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Ref<'_, [f64]>> {
        Ref::filter_map(self.0.grad.borrow(), |g| g.as_deref()).ok()
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Reverse-mode sweep from a one-element tensor. Leaf gradients
    /// accumulate across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<BackwardReport> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a one-element loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(BackwardReport { nodes_visited: 0 });
        }

        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(f) = &t.0.grad_fn {
                for input in f.inputs() {
                    if input.requires_grad() && seen.insert(input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        let mut visited = 0;
        for node in &order {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            visited += 1;
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                        None => *slot = Some(grad),
                    }
                }
                Some(f) => {
                    let output = node.0.data.borrow();
                    let grads = f.backward(&grad, &output);
                    for (input, g) in f.inputs().into_iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel(), "grad size from {}", f.name());
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(BackwardReport { nodes_visited: visited })
    }
}

fn uniform_values(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    round_to_precision(&mut v);
    v
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape()).field("requires_grad", &self.requires_grad());
        if self.is_meta() {
            s.field("meta", &true);
        } else if data.len() <= 16 {
            s.field("data", &&data[..]);
        }
        s.finish()
    }
}

#[cfg(test)]
pub(crate) fn poison_grad_for_tests(t: &Tensor) {
    if let Some(g) = t.0.grad.borrow_mut().as_mut() {
        g[0] = f64::NAN;
    }
}
