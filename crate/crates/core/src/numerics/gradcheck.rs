//! Central finite differences used as the gradient-check oracle.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// `(f(x+eps·e_i) − f(x−eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("finite difference step must be > 0"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(eps);
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - T::lit(eps);
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!("non-finite objective at coordinate {i}")));
        }
        out.push(T::lit((up - down) / (2.0 * eps)));
    }
    Tensor::new(x.dims(), out)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise [`relative_error`] between two tensors.
pub fn max_relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| relative_error(x.as_f64(), y.as_f64(), floor))
        .fold(0.0, f64::max)
}
