//! Finite-difference utilities for checking analytic gradients and
//! Hessian-vector products. They only evaluate functions, never the tape.

use crate::autodiff::ParamVector;
use crate::Scalar;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_gradient<T: Scalar, E>(
    x: &ParamVector<T>,
    h: T,
    mut f: impl FnMut(&ParamVector<T>) -> Result<T, E>,
) -> Result<ParamVector<T>, E> {
    let two = T::of(2.0);
    let mut probe = x.clone();
    let mut out = ParamVector::zeros(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out[i] = (up - down) / (two * h);
    }
    Ok(out)
}

/// `H v` by central differences of an analytic gradient:
/// `(∇f(x + h v) − ∇f(x − h v)) / 2h`.
pub fn hessian_vector<T: Scalar, E>(
    x: &ParamVector<T>,
    v: &ParamVector<T>,
    h: T,
    mut grad: impl FnMut(&ParamVector<T>) -> Result<ParamVector<T>, E>,
) -> Result<ParamVector<T>, E> {
    let mut plus = x.clone();
    plus.axpy(h, v);
    let mut minus = x.clone();
    minus.axpy(-h, v);
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    Ok(gp.sub(&gm).scaled(T::one() / (T::of(2.0) * h)))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error<T: Scalar>(a: &ParamVector<T>, b: &ParamVector<T>, floor: T) -> T {
    let scale = a.l2_norm().max(b.l2_norm()).max(floor);
    a.sub(b).l2_norm() / scale
}

/// Largest per-coordinate `|a − b| / max(|a|, |b|, floor)`.
pub fn max_coordinate_relative_error<T: Scalar>(a: &ParamVector<T>, b: &ParamVector<T>, floor: T) -> T {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(T::zero(), T::max)
}
