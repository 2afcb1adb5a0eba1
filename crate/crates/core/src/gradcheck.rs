//! Central finite differences, the reference that analytic gradients are
//! checked against.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    let (grad, _) = finite_diff_grad_tracked(|t| Ok((f(t)?, 0)), x, h)?;
    Ok(grad)
}

/// Like [`finite_diff_grad`], but `f` also returns a branch signature (see
/// [`crate::tape::Tape::branch_signature`]). The second result marks the
/// elements whose `±h` probes took the same branches as the unperturbed
/// point, i.e. where the function is smooth across the whole stencil.
pub fn finite_diff_grad_tracked<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> Result<(T, u64)>,
    x: &Tensor<T>,
    h: T,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if h.is_nan() || h <= T::zero() {
        return Err(Error::invalid("finite_diff_grad", "step must be positive"));
    }
    let (_, base) = f(x)?;
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    let mut smooth = vec![true; x.numel()];
    let two_h = h + h;
    for (i, smooth) in smooth.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, sig_plus) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (minus, sig_minus) = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / two_h;
        *smooth = sig_plus == base && sig_minus == base;
    }
    Ok((grad, smooth))
}

/// Largest elementwise `|a − n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps elements whose true gradient is (nearly) zero from being
/// judged on a relative scale they cannot resolve.
pub fn max_relative_error<T: Element>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(a.as_f64(), n.as_f64(), floor))
        .fold(0.0, f64::max)
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Result of [`check_gradient`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over the checked elements.
    pub max_rel_error: f64,
    /// Flat index of the element with the largest error.
    pub worst: Option<usize>,
    /// Elements compared with the full step.
    pub at_full_step: usize,
    /// Elements compared with a reduced step because a kink lay inside the
    /// full stencil.
    pub refined: usize,
    /// Elements left out because every step down to the minimum straddled a kink.
    pub unresolved: usize,
}

impl GradCheck {
    pub fn checked(&self) -> usize {
        self.at_full_step + self.refined
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance && self.unresolved == 0
    }
}

/// Compares `analytic` with central differences of `f` at step `h`.
///
/// `f` returns a value and a branch signature. Where the `±h` probes land on
/// a different branch than `x`, the step is halved until they do not, down
/// to `min_h`.
pub fn check_gradient<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> Result<(T, u64)>,
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    h: T,
    min_h: T,
    floor: f64,
) -> Result<GradCheck> {
    if !(h > T::zero() && min_h > T::zero()) {
        return Err(Error::invalid("check_gradient", "steps must be positive"));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "check_gradient",
            lhs: x.shape(),
            rhs: analytic.shape(),
        });
    }
    let (_, base) = f(x)?;
    let mut probe = x.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        at_full_step: 0,
        refined: 0,
        unresolved: 0,
    };
    let half = T::of(0.5);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut step = h;
        let numeric = loop {
            probe.data_mut()[i] = orig + step;
            let (plus, sig_plus) = f(&probe)?;
            probe.data_mut()[i] = orig - step;
            let (minus, sig_minus) = f(&probe)?;
            if sig_plus == base && sig_minus == base {
                break Some((plus - minus) / (step + step));
            }
            step = step * half;
            if step < min_h {
                break None;
            }
        };
        probe.data_mut()[i] = orig;
        let Some(numeric) = numeric else {
            report.unresolved += 1;
            continue;
        };
        if step == h {
            report.at_full_step += 1;
        } else {
            report.refined += 1;
        }
        let e = relative_error(analytic.data()[i].as_f64(), numeric.as_f64(), floor);
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some(i);
        }
    }
    Ok(report)
}
