//! 2x2 max pooling, stride 2. Odd spatial dimensions are floored (25 -> 12),
//! so the trailing row/column is dropped.

use super::Scalar;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Flat input index of the winning element of each output cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices(pub Vec<usize>);

pub fn pooled_dims(h: usize, w: usize) -> Result<(usize, usize)> {
    if h < 2 || w < 2 {
        return shape_err(format!("max pool needs spatial dims >= 2, got {h}x{w}"));
    }
    Ok((h / 2, w / 2))
}

pub fn maxpool2d_forward<F: Scalar>(x: &[F], xs: [usize; 4]) -> Result<(Vec<F>, PoolIndices)> {
    let [n, c, h, w] = xs;
    let (oh, ow) = pooled_dims(h, w)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                // Scan order (0,0), (0,1), (1,0), (1,1); strict > keeps the first maximum.
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((out, PoolIndices(arg)))
}

pub fn maxpool2d_backward_raw<F: Scalar>(grad_out: &[F], idx: &PoolIndices, input_len: usize) -> Result<Vec<F>> {
    if grad_out.len() != idx.0.len() {
        return shape_err("pool upstream gradient does not match output shape");
    }
    let mut dx = vec![F::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(&idx.0) {
        dx[i] = dx[i] + g;
    }
    Ok(dx)
}

pub fn maxpool2d(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let xs = x.dims4()?;
    let (out, idx) = maxpool2d_forward(x.data(), xs)?;
    let (oh, ow) = pooled_dims(xs[2], xs[3])?;
    Ok((Tensor::from_vec(&[xs[0], xs[1], oh, ow], out)?, idx))
}

pub fn maxpool2d_backward(grad_out: &Tensor, idx: &PoolIndices, input_shape: &[usize]) -> Result<Tensor> {
    let len = input_shape.iter().product();
    Tensor::from_vec(input_shape, maxpool2d_backward_raw(grad_out.data(), idx, len)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, idx) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = Tensor::new(&[1, 1, 1, 1], 1.0).unwrap();
        let dx = maxpool2d_backward(&g, &idx, x.shape()).unwrap();
        assert_eq!(dx.data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn odd_dims_floor() {
        let x = Tensor::zeros(&[1, 2, 25, 25]).unwrap();
        let (y, _) = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 12, 12]);
    }

    #[test]
    fn ties_route_to_one_cell() {
        let x = Tensor::new(&[1, 1, 4, 4], 3.0).unwrap();
        let (y, idx) = maxpool2d(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let g = Tensor::new(&[1, 1, 2, 2], 1.0).unwrap();
        let dx = maxpool2d_backward(&g, &idx, x.shape()).unwrap();
        // Exactly one receiving cell per window, the first in scan order.
        for wi in 0..2 {
            for wj in 0..2 {
                let cells = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(a, b)| dx.data()[(2 * wi + a) * 4 + 2 * wj + b]);
                assert_eq!(cells, [1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn too_small() {
        assert!(maxpool2d(&Tensor::zeros(&[1, 1, 1, 4]).unwrap()).is_err());
    }
}
