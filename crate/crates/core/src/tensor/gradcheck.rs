// Central finite differences: the independent oracle for every backward rule.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    finite_diff_coords(&mut f, x, eps, &(0..x.numel()).collect::<Vec<_>>())
        .map(|g| Tensor::from_parts(x.shape().to_vec(), g))
}

/// Central differences restricted to `coords`; the result is indexed like `coords`.
pub fn finite_diff_coords<T, F>(f: &mut F, x: &Tensor<T>, eps: T, coords: &[usize]) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let two_eps = eps + eps;
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite-difference probe".into()));
        }
        out.push((plus - minus) / two_eps);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// being judged on rounding noise alone.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst-case comparison of an analytic gradient against finite differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheck {
    pub const FLOOR: f64 = 1e-5;

    pub fn record(&mut self, label: &str, coord: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric, Self::FLOOR);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            if rel >= self.max_rel_error {
                self.worst = Some((label.to_string(), coord, analytic, numeric));
            }
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::from_f64([1], &[3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn softplus_at_zero_is_half() {
        let x = Tensor::<f64>::from_f64([1], &[0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0].exp().ln_1p()), &x, 1e-5).unwrap();
        assert!((g.item() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let x = Tensor::<f64>::from_f64([1], &[0.0]).unwrap();
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    }
}
