//! Central finite-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest relative disagreement between `analytic` and the central
/// difference of `value` around `x0`.
///
/// The per-component error is
/// `|a - d| / max(|a|, |d|, 1e-8)` with `d = (f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn check_gradient<T: Scalar>(mut value: impl FnMut(&[T]) -> Result<T>, analytic: &[T], x0: &[T], eps: T) -> Result<T> {
    if !(eps > T::zero() && eps <= T::of(1e-2)) {
        return Err(Error::invalid(format!("grad_check eps must be in (0, 1e-2], got {eps}")));
    }
    if analytic.len() != x0.len() {
        return Err(Error::invalid("analytic gradient length differs from input length"));
    }
    let mut x = x0.to_vec();
    let floor = T::of(1e-8);
    let mut worst = T::zero();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = value(&x)?;
        x[i] = orig - eps;
        let minus = value(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at perturbed component {i}")));
        }
        let numeric = (plus - minus) / (eps + eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check of a graph-built scalar function of one tensor.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.variable(x);
    let root = f(&mut g, xv)?;
    let grads = g.backward(root)?;
    let analytic = grads.wrt(xv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.len()]);
    let shape = x.shape().to_vec();
    let value = |vals: &[T]| -> Result<T> {
        let mut g = Graph::new();
        let xv = g.constant(&Tensor::new(&shape, vals.to_vec())?);
        let root = f(&mut g, xv)?;
        g.scalar(root)
    };
    check_gradient(value, &analytic, x.values(), eps)
}
