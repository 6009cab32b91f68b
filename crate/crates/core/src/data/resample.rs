//! Bilinear resampling with aligned corners: output pixel `i` samples source
//! coordinate `i * (n_in - 1) / (n_out - 1)`, so corner pixels map exactly.

use crate::data::patch::ImagePatch;
use crate::error::{Error, Result};

pub const TARGET_SIZE: usize = 200;

fn axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Resamples to `size x size`. A patch already at the target size is
/// returned unchanged.
pub fn resample(patch: &ImagePatch, size: usize) -> Result<ImagePatch> {
    resample_to(patch, size, size)
}

pub fn resample_to(patch: &ImagePatch, height: usize, width: usize) -> Result<ImagePatch> {
    if patch.height == 0 || patch.width == 0 || height == 0 || width == 0 {
        return Err(Error::Format(format!(
            "cannot resample {}x{} to {height}x{width}",
            patch.height, patch.width
        )));
    }
    if (patch.height, patch.width) == (height, width) {
        return Ok(patch.clone());
    }
    let ys = axis(patch.height, height);
    let xs = axis(patch.width, width);
    let mut out = Vec::with_capacity(height * width * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = patch.at(y0, x0, c) * (1.0 - fx) + patch.at(y0, x1, c) * fx;
                let bottom = patch.at(y1, x0, c) * (1.0 - fx) + patch.at(y1, x1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    patch.with_pixels(height, width, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::Label;

    fn random(h: usize, w: usize, seed: u64) -> ImagePatch {
        let px = RngStream::new(seed, 0).uniform_f32(0.0, 255.0, h * w * 3).unwrap();
        ImagePatch::new(h, w, px, Label::Uninfected).unwrap()
    }

    #[test]
    fn identity_size() {
        let p = random(200, 200, 1);
        assert_eq!(resample(&p, 200).unwrap(), p);
    }

    #[test]
    fn constant_field() {
        let p = ImagePatch::filled(110, 110, [10.0, 120.0, 250.0], Label::Parasitized).unwrap();
        let q = resample(&p, 200).unwrap();
        assert_eq!((q.height, q.width), (200, 200));
        for px in q.pixels.chunks(3) {
            for (a, b) in px.iter().zip([10.0, 120.0, 250.0]) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn corners_match() {
        let p = random(150, 110, 2);
        let q = resample(&p, 200).unwrap();
        for (sy, sx, dy, dx) in [(0, 0, 0, 0), (0, 109, 0, 199), (149, 0, 199, 0), (149, 109, 199, 199)] {
            for c in 0..3 {
                assert_eq!(q.at(dy, dx, c), p.at(sy, sx, c));
            }
        }
    }

    #[test]
    fn zero_target() {
        assert!(matches!(resample(&random(4, 4, 0), 0), Err(Error::Format(_))));
    }
}
