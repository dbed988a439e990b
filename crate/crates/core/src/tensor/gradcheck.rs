//! Central finite-difference verification of analytic gradients.

use super::{no_grad, with_precision, Precision, Tensor};
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_loss(loss: &Tensor) -> Result<f64> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            loss.shape()
        )));
    }
    Ok(loss.item())
}

/// Max over elements of `|analytic − numeric| / max(1, |numeric|)` for the
/// scalar function `f` at `x`, with step `eps·max(1, |x_i|)`.
///
/// Runs in double precision regardless of the ambient mode.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    with_precision(Precision::F64, || {
        let param = x.detach().into_param();
        let loss = f(&param)?;
        scalar_loss(&loss)?;
        loss.backward()?;
        let analytic = param.grad_vec().unwrap_or_else(|| vec![0.0; param.numel()]);

        let base = x.to_vec();
        let mut worst: f64 = 0.0;
        let mut probe = base.clone();
        for i in 0..base.len() {
            let h = eps * base[i].abs().max(1.0);
            let (up, down) = (base[i] + h, base[i] - h);
            probe[i] = up;
            let plus = no_grad(|| f(&Tensor::from_vec(x.shape(), probe.clone())?))?;
            probe[i] = down;
            let minus = no_grad(|| f(&Tensor::from_vec(x.shape(), probe.clone())?))?;
            probe[i] = base[i];
            // divide by the representable step, not the requested one
            let numeric = (scalar_loss(&plus)? - scalar_loss(&minus)?) / (up - down);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        Ok(worst)
    })
}

/// Result of a parameter sweep, with the worst coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Finite-difference sweep over (a subset of) the coordinates of named leaf
/// parameters. Up to `per_tensor` evenly spaced coordinates are probed in
/// each tensor. Parameter values are restored afterwards.
pub fn grad_check_params<F>(
    f: F,
    params: &[(String, Tensor)],
    per_tensor: usize,
    eps: f64,
) -> Result<SweepReport>
where
    F: Fn() -> Result<Tensor>,
{
    with_precision(Precision::F64, || {
        for (_, p) in params {
            p.zero_grad();
        }
        let loss = f()?;
        scalar_loss(&loss)?;
        loss.backward()?;
        drop(loss);

        let mut report = SweepReport {
            max_rel_error: 0.0,
            worst_param: String::new(),
            worst_index: 0,
            checked: 0,
        };
        for (name, p) in params {
            let analytic = p.grad_vec().unwrap_or_else(|| vec![0.0; p.numel()]);
            let n = p.numel();
            let count = per_tensor.min(n).max(1);
            let stride = n / count;
            for j in 0..count {
                let i = j * stride;
                let original = p.data()[i];
                let h = eps * original.abs().max(1.0);
                let eval = |v: f64| -> Result<f64> {
                    p.update(|d| d[i] = v);
                    let out = no_grad(&f).and_then(|l| scalar_loss(&l));
                    p.update(|d| d[i] = original);
                    out
                };
                let (up, down) = (original + h, original - h);
                let numeric = (eval(up)? - eval(down)?) / (up - down);
                let err = relative_error(analytic[i], numeric);
                report.checked += 1;
                if err > report.max_rel_error || report.worst_param.is_empty() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst_param = name.clone();
                    report.worst_index = i;
                }
            }
            p.zero_grad();
        }
        Ok(report)
    })
}
