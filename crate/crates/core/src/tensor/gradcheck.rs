use super::{Scalar, Tensor};
use crate::error::Result;

/// Central-difference estimate of ∂f/∂x, one element at a time.
pub fn fd_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    let two = T::of(2.0);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (two * eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `|a - b| / max(|a|, |b|, 1e-6)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x.as_f64(), y.as_f64()))
        .fold(0.0, f64::max)
}
