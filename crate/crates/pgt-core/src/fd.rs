//! Central finite differences, used as an independent gradient oracle.
//!
//! Probes are f64-only: the comparisons that rely on them pin tolerances
//! assuming double precision.

use crate::error::Result;
use crate::tensor::rel_err;

/// Central-difference gradient of `f` at `x`, one probe pair per component.
pub fn central_diff<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe)?;
        probe[i] = orig - eps;
        let lo = f(&probe)?;
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest componentwise relative error between two gradient vectors,
/// with the denominator floored to keep near-zero components meaningful.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_recovered() {
        // f(x) = sum(i * x_i^2), df/dx_i = 2 i x_i
        let f = |x: &[f64]| -> Result<f64> {
            Ok(x.iter().enumerate().map(|(i, &v)| i as f64 * v * v).sum())
        };
        let x = [0.5, -1.5, 2.0, 0.0];
        let g = central_diff(f, &x, 1e-5).unwrap();
        let expect: Vec<f64> = x.iter().enumerate().map(|(i, &v)| 2.0 * i as f64 * v).collect();
        assert!(max_rel_err(&g, &expect, 1e-8) < 1e-8);
    }

    #[test]
    fn rel_err_floor_handles_zeros() {
        assert_eq!(max_rel_err(&[0.0], &[0.0], 1e-8), 0.0);
        assert!(max_rel_err(&[1e-12], &[0.0], 1e-8) < 1e-3);
    }
}
