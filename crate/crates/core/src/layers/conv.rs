//! 2-D convolution, stride 1, "same" zero padding, odd square kernels.
//!
//! Implemented as per-sample im2col followed by a GEMM, so each sample's
//! output block `[O, H*W]` is written in place in NCHW order. Samples run in
//! parallel.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use super::Scalar;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Samples per backward work unit.
pub const GROUP: usize = 8;

pub struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Vec<F>,
    pub db: Vec<F>,
}

fn check(xs: [usize; 4], ws: [usize; 4], b_len: usize) -> Result<()> {
    let [n, c, h, w] = xs;
    let [o, wc, kh, kw] = ws;
    if n * c * h * w * o == 0 {
        return shape_err(format!("empty convolution {xs:?} * {ws:?}"));
    }
    if c != wc {
        return shape_err(format!("input has {c} channels, kernel expects {wc}"));
    }
    if kh != kw || kh % 2 == 0 {
        return shape_err(format!("kernel {kh}x{kw} must be odd and square"));
    }
    if b_len != o {
        return shape_err(format!("bias has {b_len} entries, expected {o}"));
    }
    Ok(())
}

/// Unfolds one `[C, H, W]` sample into `[C*k*k, H*W]`.
fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize, k: usize, cols: &mut [F]) {
    let pad = k / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ki as isize - pad as isize;
                    let drow = &mut dst[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let srow = &plane[si as usize * w..(si as usize + 1) * w];
                    for (j, d) in drow.iter_mut().enumerate() {
                        let sj = j as isize + kj as isize - pad as isize;
                        *d = if sj < 0 || sj >= w as isize {
                            F::zero()
                        } else {
                            srow[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[C*k*k, H*W]` column gradients back onto a `[C, H, W]` sample.
fn col2im<F: Scalar>(cols: &[F], c: usize, h: usize, w: usize, k: usize, dx: &mut [F]) {
    let pad = k / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ki as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kj as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            plane[si as usize * w + sj as usize] =
                                plane[si as usize * w + sj as usize] + src[i * w + j];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Scalar>(
    x: &[F],
    xs: [usize; 4],
    w: &[F],
    ws: [usize; 4],
    b: &[F],
) -> Result<Vec<F>> {
    check(xs, ws, b.len())?;
    let [n, c, h, wd] = xs;
    let [o, _, k, _] = ws;
    let hw = h * wd;
    let ckk = c * k * k;
    let wmat = ArrayView2::from_shape((o, ckk), w).expect("kernel layout");
    let mut out = vec![F::zero(); n * o * hw];
    out.par_chunks_mut(o * hw).enumerate().for_each_init(
        || vec![F::zero(); ckk * hw],
        |cols, (s, block)| {
            im2col(&x[s * c * hw..(s + 1) * c * hw], c, h, wd, k, cols);
            let colv = ArrayView2::from_shape((ckk, hw), &cols[..]).expect("cols layout");
            for (oc, chunk) in block.chunks_mut(hw).enumerate() {
                chunk.fill(b[oc]);
            }
            let mut outv = ArrayViewMut2::from_shape((o, hw), block).expect("out layout");
            general_mat_mul(F::one(), &wmat, &colv, F::one(), &mut outv);
        },
    );
    Ok(out)
}

/// Gradients of a scalar loss w.r.t. input, kernel and bias given the
/// upstream gradient `grad_out` (same shape as the forward output).
///
/// Samples are processed in fixed groups of [`GROUP`]; each group sums its
/// samples in order and the group partials are then summed in order, so the
/// result does not depend on the number of worker threads.
pub fn conv2d_backward_raw<F: Scalar>(
    x: &[F],
    xs: [usize; 4],
    w: &[F],
    ws: [usize; 4],
    grad_out: &[F],
    need_dx: bool,
) -> Result<ConvGrads<F>> {
    check(xs, ws, ws[0])?;
    let [n, c, h, wd] = xs;
    let [o, _, k, _] = ws;
    let hw = h * wd;
    let ckk = c * k * k;
    if grad_out.len() != n * o * hw {
        return shape_err("conv upstream gradient does not match output shape");
    }
    let wmat = ArrayView2::from_shape((o, ckk), w).expect("kernel layout");
    let mut dx = if need_dx {
        Some(vec![F::zero(); n * c * hw])
    } else {
        None
    };
    let group_of = |g: usize, dx_block: Option<&mut [F]>| {
        let mut dw = vec![F::zero(); o * ckk];
        let mut db = vec![F::zero(); o];
        let mut cols = vec![F::zero(); ckk * hw];
        let mut dcols = vec![F::zero(); if dx_block.is_some() { ckk * hw } else { 0 }];
        let mut dx_block = dx_block;
        let first = g * GROUP;
        for s in first..n.min(first + GROUP) {
            let gs = &grad_out[s * o * hw..(s + 1) * o * hw];
            for (oc, chunk) in gs.chunks(hw).enumerate() {
                db[oc] = chunk.iter().fold(db[oc], |acc, &v| acc + v);
            }
            let gv = ArrayView2::from_shape((o, hw), gs).expect("grad layout");
            im2col(&x[s * c * hw..(s + 1) * c * hw], c, h, wd, k, &mut cols);
            let colv = ArrayView2::from_shape((ckk, hw), &cols[..]).expect("cols layout");
            {
                let mut dwv = ArrayViewMut2::from_shape((o, ckk), &mut dw[..]).expect("dw layout");
                general_mat_mul(F::one(), &gv, &colv.t(), F::one(), &mut dwv);
            }
            if let Some(block) = dx_block.as_deref_mut() {
                let mut dcv = ArrayViewMut2::from_shape((ckk, hw), &mut dcols[..]).expect("dcols layout");
                general_mat_mul(F::one(), &wmat.t(), &gv, F::zero(), &mut dcv);
                let local = s - first;
                col2im(&dcols, c, h, wd, k, &mut block[local * c * hw..(local + 1) * c * hw]);
            }
        }
        (dw, db)
    };
    let groups = n.div_ceil(GROUP);
    let partials: Vec<(Vec<F>, Vec<F>)> = match dx.as_mut() {
        Some(dx) => dx
            .par_chunks_mut(GROUP * c * hw)
            .enumerate()
            .map(|(g, block)| group_of(g, Some(block)))
            .collect(),
        None => (0..groups).into_par_iter().map(|g| group_of(g, None)).collect(),
    };
    let mut parts = partials.into_iter();
    let (mut dw, mut db) = parts.next().expect("at least one sample");
    for (pw, pb) in parts {
        dw.iter_mut().zip(&pw).for_each(|(a, &b)| *a = *a + b);
        db.iter_mut().zip(&pb).for_each(|(a, &b)| *a = *a + b);
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Same-padded stride-1 convolution of an NCHW batch.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.dims4()?;
    let ws = w.dims4()?;
    let out = conv2d_forward(x.data(), xs, w.data(), ws, b.data())?;
    Tensor::from_vec(&[xs[0], ws[0], xs[2], xs[3]], out)
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let xs = x.dims4()?;
    let ws = w.dims4()?;
    let g = conv2d_backward_raw(x.data(), xs, w.data(), ws, grad_out.data(), true)?;
    Ok((
        Tensor::from_vec(x.shape(), g.dx.expect("requested"))?,
        Tensor::from_vec(w.shape(), g.dw)?,
        Tensor::from_vec(&[ws[0]], g.db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_gradient_f64, relative_error};
    use crate::rng::RngStream;

    /// Direct six-loop convolution, independent of im2col/GEMM.
    fn naive(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64]) -> Vec<f64> {
        let [n, c, h, wd] = xs;
        let [o, _, k, _] = ws;
        let p = (k / 2) as isize;
        let mut out = vec![0.0; n * o * h * wd];
        for s in 0..n {
            for oc in 0..o {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b[oc];
                        for ch in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let si = i as isize + ki as isize - p;
                                    let sj = j as isize + kj as isize - p;
                                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < wd {
                                        acc += x[((s * c + ch) * h + si as usize) * wd + sj as usize]
                                            * w[((oc * c + ch) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out[((s * o + oc) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn impulse_response_is_kernel() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        x.data_mut()[2 * 5 + 2] = 1.0;
        let k: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let w = Tensor::from_vec(&[1, 1, 3, 3], k.clone()).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv2d(&x, &w, &b).unwrap();
        // Cross-correlation: the response around the impulse is the kernel flipped.
        for di in 0..3 {
            for dj in 0..3 {
                let v = y.data()[(1 + di) * 5 + (1 + dj)];
                assert_eq!(v, k[(2 - di) * 3 + (2 - dj)]);
            }
        }
        let total: f32 = y.data().iter().sum();
        assert_eq!(total, 45.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut s = RngStream::new(0, 0);
        let x = Tensor::uniform(&[2, 3, 6, 7], -1.0, 1.0, &mut s).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 3, 3]).unwrap();
        for c in 0..3 {
            w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let w = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]).unwrap()).is_err());
    }

    #[test]
    fn matches_naive_loops() {
        let mut s = RngStream::new(3, 0);
        let xs = [2, 3, 5, 6];
        let ws = [4, 3, 3, 3];
        let x: Vec<f64> = (0..xs.iter().product()).map(|_| s.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..ws.iter().product()).map(|_| s.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| s.uniform(-1.0, 1.0)).collect();
        let fast = conv2d_forward(&x, xs, &w, ws, &b).unwrap();
        let slow = naive(&x, xs, &w, ws, &b);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_fd_on_f64_path() {
        let mut s = RngStream::new(0, 1);
        let xs = [2, 3, 8, 8];
        let ws = [2, 3, 3, 3];
        let x: Vec<f64> = (0..xs.iter().product()).map(|_| s.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..ws.iter().product()).map(|_| s.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| s.uniform(-1.0, 1.0)).collect();
        let r: Vec<f64> = (0..2 * 2 * 64).map(|_| s.uniform(-1.0, 1.0)).collect();
        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            naive(x, xs, w, ws, b).iter().zip(&r).map(|(a, c)| a * c).sum()
        };
        let g = conv2d_backward_raw(&x, xs, &w, ws, &r, true).unwrap();
        let ndx = finite_diff_gradient_f64(|v| loss(v, &w, &b), &x, 1e-3).unwrap();
        let ndw = finite_diff_gradient_f64(|v| loss(&x, v, &b), &w, 1e-3).unwrap();
        let ndb = finite_diff_gradient_f64(|v| loss(&x, &w, v), &b, 1e-3).unwrap();
        assert!(relative_error(g.dx.as_ref().unwrap(), &ndx) < 1e-6);
        assert!(relative_error(&g.dw, &ndw) < 1e-6);
        assert!(relative_error(&g.db, &ndb) < 1e-6);
    }

    #[test]
    fn grouped_backward_matches_per_sample_sum() {
        let mut s = RngStream::new(4, 0);
        let xs = [2 * GROUP + 3, 2, 5, 5];
        let ws = [3, 2, 3, 3];
        let x: Vec<f64> = (0..xs.iter().product()).map(|_| s.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..ws.iter().product()).map(|_| s.uniform(-1.0, 1.0)).collect();
        let g: Vec<f64> = (0..xs[0] * 3 * 25).map(|_| s.uniform(-1.0, 1.0)).collect();
        let all = conv2d_backward_raw(&x, xs, &w, ws, &g, true).unwrap();
        let (mut dw, mut db, mut dx) = (vec![0.0; w.len()], vec![0.0; 3], Vec::new());
        for i in 0..xs[0] {
            let one = conv2d_backward_raw(&x[i * 50..(i + 1) * 50], [1, 2, 5, 5], &w, ws, &g[i * 75..(i + 1) * 75], true).unwrap();
            dw.iter_mut().zip(&one.dw).for_each(|(a, b)| *a += b);
            db.iter_mut().zip(&one.db).for_each(|(a, b)| *a += b);
            dx.extend(one.dx.unwrap());
        }
        assert_eq!(all.dx.unwrap(), dx);
        assert!(relative_error(&all.dw, &dw) < 1e-12);
        assert!(relative_error(&all.db, &db) < 1e-12);
    }
}
