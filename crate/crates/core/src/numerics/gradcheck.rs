//! Central finite differences, the reference every backward rule is
//! checked against.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every element `i`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>> {
    let coords: Vec<usize> = (0..x.len()).collect();
    let partial = finite_diff_partial(&mut f, x, eps, &coords)?;
    Ok(Tensor::from_parts(x.dims().to_vec(), partial))
}

/// Finite differences for a subset of flat coordinates.
pub fn finite_diff_partial(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    eps: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_grad", "eps must be positive"));
    }
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
            return Err(Error::NonFinite("finite_diff_grad objective".into()));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Norm-wise relative error `max|a − n| / max(max|a|, max|n|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-10;
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(FLOOR, |m, v| m.max(v.abs()));
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_closed_form() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_finite_objective() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }
}
