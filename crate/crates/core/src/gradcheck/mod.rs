//! Central finite-difference gradient oracle.
//!
//! The oracle evaluates the scalar function in f64 and divides by the step
//! actually realised after rounding the perturbed coordinate to f32, so the
//! only error left for f32 inputs is the function's own rounding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod suite;

pub use suite::{default_cases, run_suite, GradCase, SuiteReport, GRADCHECK_TOLERANCE};

pub const DEFAULT_STEP: f64 = 1e-3;

/// `|a - b| / max(1e-8, |a| + |b|)` with Euclidean norms over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-8)
}

pub fn relative_error_f32(a: &[f32], b: &[f32]) -> f64 {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    relative_error(&a, &b)
}

/// Per-coordinate `(f(x + h e_i) - f(x - h e_i)) / (2h)` for an f32 tensor.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Oracle(format!("step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let plus = (orig as f64 + h) as f32;
        let minus = (orig as f64 - h) as f32;
        probe.data_mut()[i] = plus;
        let fp = f(&probe);
        probe.data_mut()[i] = minus;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle(format!("non-finite function value at coordinate {i}")));
        }
        let step = plus as f64 - minus as f64;
        grad.push(((fp - fm) / step) as f32);
    }
    Tensor::from_vec(x.shape(), grad)
}

/// The same oracle on an f64 vector.
pub fn finite_diff_gradient_f64<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Oracle(format!("step {h} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle(format!("non-finite function value at coordinate {i}")));
        }
        grad.push((fp - fm) / ((orig + h) - (orig - h)));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    #[test]
    fn square() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = finite_diff_gradient(|t| t.data().iter().map(|&v| (v as f64).powi(2)).sum(), &x, 1e-3).unwrap();
        assert!((g.data()[0] as f64 - 6.0).abs() < 1e-5, "{}", g.data()[0]);
    }

    #[test]
    fn linear_is_all_ones() {
        let mut s = RngStream::new(0, 0);
        let x: Vec<f64> = (0..20).map(|_| s.uniform(-10.0, 10.0)).collect();
        let g = finite_diff_gradient_f64(|v| v.iter().sum(), &x, 1e-3).unwrap();
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn non_finite_is_error() {
        let x = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let r = finite_diff_gradient(|_| f64::NAN, &x, 1e-3);
        assert!(matches!(r, Err(Error::Oracle(_))));
    }

    proptest! {
        // Central differences are exact on quadratics.
        #[test]
        fn quadratic_exact(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, x0 in -5.0f64..5.0, x1 in -5.0f64..5.0) {
            let f = |v: &[f64]| a * v[0] * v[0] + b * v[0] * v[1] + c * v[1] + 0.5;
            let g = finite_diff_gradient_f64(f, &[x0, x1], 1e-3).unwrap();
            prop_assert!((g[0] - (2.0 * a * x0 + b * x1)).abs() < 1e-9);
            prop_assert!((g[1] - (b * x0 + c)).abs() < 1e-9);
        }
    }
}
