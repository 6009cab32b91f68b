//! Fully connected layer: `y = x W + b`, with `W` stored as (in, out).

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::Scalar;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub struct DenseGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Vec<F>,
    pub db: Vec<F>,
}

fn check(batch: usize, inputs: usize, x_len: usize, w_len: usize, b_len: usize) -> Result<usize> {
    if x_len != batch * inputs {
        return shape_err("dense input length mismatch");
    }
    if b_len == 0 || w_len != inputs * b_len {
        return shape_err(format!(
            "dense weight has {w_len} entries, expected {inputs}x{b_len}"
        ));
    }
    Ok(b_len)
}

pub fn dense_forward<F: Scalar>(x: &[F], batch: usize, inputs: usize, w: &[F], b: &[F]) -> Result<Vec<F>> {
    let outputs = check(batch, inputs, x.len(), w.len(), b.len())?;
    let xv = ArrayView2::from_shape((batch, inputs), x).expect("x layout");
    let wv = ArrayView2::from_shape((inputs, outputs), w).expect("w layout");
    let mut out: Vec<F> = (0..batch).flat_map(|_| b.iter().copied()).collect();
    let mut ov = ArrayViewMut2::from_shape((batch, outputs), &mut out[..]).expect("out layout");
    general_mat_mul(F::one(), &xv, &wv, F::one(), &mut ov);
    Ok(out)
}

pub fn dense_backward_raw<F: Scalar>(
    x: &[F],
    batch: usize,
    inputs: usize,
    w: &[F],
    grad_out: &[F],
    need_dx: bool,
) -> Result<DenseGrads<F>> {
    let outputs = w.len() / inputs.max(1);
    check(batch, inputs, x.len(), w.len(), outputs)?;
    if grad_out.len() != batch * outputs {
        return shape_err("dense upstream gradient does not match output shape");
    }
    let xv = ArrayView2::from_shape((batch, inputs), x).expect("x layout");
    let wv = ArrayView2::from_shape((inputs, outputs), w).expect("w layout");
    let gv = ArrayView2::from_shape((batch, outputs), grad_out).expect("g layout");
    let mut dw = vec![F::zero(); inputs * outputs];
    {
        let mut dwv = ArrayViewMut2::from_shape((inputs, outputs), &mut dw[..]).expect("dw layout");
        general_mat_mul(F::one(), &xv.t(), &gv, F::zero(), &mut dwv);
    }
    let mut db = vec![F::zero(); outputs];
    for row in grad_out.chunks(outputs) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    let dx = if need_dx {
        let mut dx = vec![F::zero(); batch * inputs];
        let mut dxv = ArrayViewMut2::from_shape((batch, inputs), &mut dx[..]).expect("dx layout");
        general_mat_mul(F::one(), &gv, &wv.t(), F::zero(), &mut dxv);
        Some(dx)
    } else {
        None
    };
    Ok(DenseGrads { dx, dw, db })
}

pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [batch, inputs] = x.dims2()?;
    let [win, wout] = w.dims2()?;
    if win != inputs {
        return shape_err(format!("dense expects {win} inputs, got {inputs}"));
    }
    Tensor::from_vec(&[batch, wout], dense_forward(x.data(), batch, inputs, w.data(), b.data())?)
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [batch, inputs] = x.dims2()?;
    let [_, outputs] = w.dims2()?;
    let g = dense_backward_raw(x.data(), batch, inputs, w.data(), grad_out.data(), true)?;
    Ok((
        Tensor::from_vec(x.shape(), g.dx.expect("requested"))?,
        Tensor::from_vec(w.shape(), g.dw)?,
        Tensor::from_vec(&[outputs], g.db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_gradient, relative_error_f32};
    use crate::rng::RngStream;

    #[test]
    fn identity_and_zero_input() {
        let mut s = RngStream::new(1, 0);
        let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut s).unwrap();
        let mut w = Tensor::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(dense(&x, &w, &Tensor::zeros(&[3]).unwrap()).unwrap(), x);

        let b = Tensor::from_vec(&[2], vec![0.25, -3.0]).unwrap();
        let y = dense(&Tensor::zeros(&[3, 5]).unwrap(), &Tensor::uniform(&[5, 2], -1.0, 1.0, &mut s).unwrap(), &b).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn mismatch() {
        let x = Tensor::zeros(&[2, 4]).unwrap();
        let w = Tensor::zeros(&[3, 2]).unwrap();
        assert!(dense(&x, &w, &Tensor::zeros(&[2]).unwrap()).is_err());
    }

    #[test]
    fn gradients_match_oracle() {
        let mut s = RngStream::new(2, 0);
        let x = Tensor::uniform(&[4, 7], -1.0, 1.0, &mut s).unwrap();
        let w = Tensor::uniform(&[7, 3], -1.0, 1.0, &mut s).unwrap();
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut s).unwrap();
        let r = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut s).unwrap();
        let proj = |y: Tensor| y.data().iter().zip(r.data()).map(|(a, c)| *a as f64 * *c as f64).sum::<f64>();
        let (dx, dw, db) = dense_backward(&x, &w, &r).unwrap();
        let nx = finite_diff_gradient(|t| proj(dense(t, &w, &b).unwrap()), &x, 1e-3).unwrap();
        let nw = finite_diff_gradient(|t| proj(dense(&x, t, &b).unwrap()), &w, 1e-3).unwrap();
        let nb = finite_diff_gradient(|t| proj(dense(&x, &w, t).unwrap()), &b, 1e-3).unwrap();
        assert!(relative_error_f32(dx.data(), nx.data()) < 1e-3);
        assert!(relative_error_f32(dw.data(), nw.data()) < 1e-3);
        assert!(relative_error_f32(db.data(), nb.data()) < 1e-3);
    }
}
