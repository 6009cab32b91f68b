//! Pixel-value transforms on `(N, 3, H, W)` tensors.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `x / 255`: maps the 8-bit range onto `[0, 1]`.
pub fn min_max_rescale(x: &Tensor) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::Range(format!("pixel value {v} outside [0, 255]")));
    }
    Ok(x.map(|v| (v as f64 / 255.0) as f32))
}

fn channel_planes(x: &Tensor) -> Result<(usize, usize)> {
    let [n, c, h, w] = x.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    Ok((n, h * w))
}

/// Per-channel mean and population standard deviation of a training set.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StandardizeStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl StandardizeStats {
    pub fn fit(x: &Tensor) -> Result<StandardizeStats> {
        let (n, hw) = channel_planes(x)?;
        let mut sum = [0.0f64; 3];
        for s in 0..n {
            for (c, acc) in sum.iter_mut().enumerate() {
                let base = (s * 3 + c) * hw;
                *acc += x.data()[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (n * hw) as f64;
        let mean = sum.map(|s| s / count);
        let mut sq = [0.0f64; 3];
        for s in 0..n {
            for (c, acc) in sq.iter_mut().enumerate() {
                let base = (s * 3 + c) * hw;
                *acc += x.data()[base..base + hw].iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
            }
        }
        Ok(StandardizeStats {
            mean,
            std: sq.map(|s| (s / count).sqrt()),
        })
    }

    fn check(&self) -> Result<()> {
        if let Some(c) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::DegenerateStats(format!("channel {c} has zero standard deviation")));
        }
        Ok(())
    }
}

fn per_channel(x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Result<Tensor> {
    let (_, hw) = channel_planes(x)?;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f((i / hw) % 3, v as f64) as f32)
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// `(x - mu) / sigma` per channel.
pub fn standardize(x: &Tensor, stats: &StandardizeStats) -> Result<Tensor> {
    stats.check()?;
    per_channel(x, |c, v| (v - stats.mean[c]) / stats.std[c])
}

/// `(x - mu) / 255` per channel: mean-centering with a fixed range scale.
pub fn mean_normalize(x: &Tensor, stats: &StandardizeStats) -> Result<Tensor> {
    stats.check()?;
    per_channel(x, |c, v| (v - stats.mean[c]) / 255.0)
}

/// Whitening of the 3x3 colour covariance: `W (x - mu)` with
/// `W = U diag(1 / sqrt(lambda + eps)) U^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZcaWhitening {
    pub mean: [f64; 3],
    pub matrix: [[f64; 3]; 3],
}

impl ZcaWhitening {
    pub fn fit(x: &Tensor, eps: f64) -> Result<ZcaWhitening> {
        let (n, hw) = channel_planes(x)?;
        let stats = StandardizeStats::fit(x)?;
        let mu = Vector3::from(stats.mean);
        let mut cov = Matrix3::<f64>::zeros();
        for s in 0..n {
            for i in 0..hw {
                let v = Vector3::from_fn(|c, _| x.data()[(s * 3 + c) * hw + i] as f64) - mu;
                cov += v * v.transpose();
            }
        }
        cov /= (n * hw) as f64;
        let eig = SymmetricEigen::new(cov);
        if eig.eigenvalues.iter().any(|&l| !(l + eps > 0.0)) {
            return Err(Error::DegenerateStats("colour covariance is singular".into()));
        }
        let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l + eps).sqrt()));
        let w = eig.eigenvectors * d * eig.eigenvectors.transpose();
        Ok(ZcaWhitening {
            mean: stats.mean,
            matrix: std::array::from_fn(|r| std::array::from_fn(|c| w[(r, c)])),
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, hw) = channel_planes(x)?;
        let mut out = vec![0.0f32; x.len()];
        for s in 0..n {
            for i in 0..hw {
                let v: [f64; 3] = std::array::from_fn(|c| x.data()[(s * 3 + c) * hw + i] as f64 - self.mean[c]);
                for r in 0..3 {
                    out[(s * 3 + r) * hw + i] = (0..3).map(|c| self.matrix[r][c] * v[c]).sum::<f64>() as f32;
                }
            }
        }
        Tensor::from_vec(x.shape(), out)
    }
}
