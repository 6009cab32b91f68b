//! ReLU and the two-way softmax.

use super::Scalar;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub fn relu_forward<F: Scalar>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect()
}

/// The derivative at exactly zero is taken as zero.
pub fn relu_backward_raw<F: Scalar>(x: &[F], grad_out: &[F]) -> Vec<F> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > F::zero() { g } else { F::zero() })
        .collect()
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return shape_err("relu gradient shape mismatch");
    }
    Tensor::from_vec(x.shape(), relu_backward_raw(x.data(), grad_out.data()))
}

/// Row-wise softmax over pairs of logits, with max subtraction.
pub fn softmax2_forward<F: Scalar>(z: &[F]) -> Result<Vec<F>> {
    if z.len() % 2 != 0 {
        return shape_err("softmax2 expects (batch, 2) logits");
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(2) {
        let m = row[0].max(row[1]);
        let e0 = (row[0] - m).exp();
        let e1 = (row[1] - m).exp();
        let s = e0 + e1;
        out.push(e0 / s);
        out.push(e1 / s);
    }
    Ok(out)
}

/// Vector-Jacobian product: dz_i = p_i (g_i - sum_j g_j p_j).
pub fn softmax2_backward_raw<F: Scalar>(p: &[F], grad_out: &[F]) -> Vec<F> {
    let mut dz = Vec::with_capacity(p.len());
    for (pr, gr) in p.chunks(2).zip(grad_out.chunks(2)) {
        let dot = pr[0] * gr[0] + pr[1] * gr[1];
        dz.push(pr[0] * (gr[0] - dot));
        dz.push(pr[1] * (gr[1] - dot));
    }
    dz
}

pub fn softmax2(z: &Tensor) -> Result<Tensor> {
    let [_, k] = z.dims2()?;
    if k != 2 {
        return shape_err(format!("softmax2 expects 2 logits per row, got {k}"));
    }
    Tensor::from_vec(z.shape(), softmax2_forward(z.data())?)
}

/// Takes the forward *output* probabilities.
pub fn softmax2_backward(p: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if p.shape() != grad_out.shape() {
        return shape_err("softmax gradient shape mismatch");
    }
    Tensor::from_vec(p.shape(), softmax2_backward_raw(p.data(), grad_out.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_gradient, relative_error_f32};
    use crate::rng::RngStream;

    #[test]
    fn relu_values() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::new(&[3], 1.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let pos = Tensor::from_vec(&[2], vec![0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn relu_gradient_off_kink() {
        let mut s = RngStream::new(5, 0);
        let mut x = Tensor::uniform(&[4, 10], -1.0, 1.0, &mut s).unwrap();
        for v in x.data_mut() {
            if v.abs() < 0.02 {
                *v = 0.5;
            }
        }
        let r = Tensor::uniform(&[4, 10], -1.0, 1.0, &mut s).unwrap();
        let f = |t: &Tensor| relu(t).data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
        let num = finite_diff_gradient(f, &x, 1e-3).unwrap();
        let ana = relu_backward(&x, &r).unwrap();
        assert!(relative_error_f32(ana.data(), num.data()) < 1e-4);
    }

    #[test]
    fn softmax_values() {
        let z = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax2(&z).unwrap().data(), &[0.5, 0.5]);
        let z = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let p = softmax2(&z).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] as f64 - e / (e + 1.0)).abs() < 1e-4);
        assert!((p.data()[1] as f64 - 1.0 / (e + 1.0)).abs() < 1e-4);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4 && (p.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_shift_invariant_and_stable() {
        let a = softmax2(&Tensor::from_vec(&[2, 2], vec![0.3, -1.2, 5.0, 4.0]).unwrap()).unwrap();
        let b = softmax2(&Tensor::from_vec(&[2, 2], vec![100.3, 98.8, 1005.0, 1004.0]).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        assert!(b.all_finite());
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let z = Tensor::from_vec(&[1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(softmax2(&z), Err(Error::Numeric(_))));
        let z = Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(softmax2(&z).is_err());
    }
}
