//! Stain normalisation by statistics transfer in an opponent colour space.
//!
//! RGB is rotated into the orthonormal basis
//!
//! ```text
//! l  = (R + G + B) / sqrt(3)
//! o1 = (R - G) / sqrt(2)
//! o2 = (R + G - 2B) / sqrt(6)
//! ```
//!
//! Each opponent channel is mapped linearly so that its mean and standard
//! deviation equal the reference's, then rotated back and clipped to
//! `[0, 255]`.

use serde::{Deserialize, Serialize};

use crate::data::patch::ImagePatch;
use crate::error::{Error, Result};

const S2: f64 = std::f64::consts::SQRT_2;

fn s3() -> f64 {
    3f64.sqrt()
}

fn s6() -> f64 {
    6f64.sqrt()
}

pub fn rgb_to_opponent(p: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = p;
    [(r + g + b) / s3(), (r - g) / S2, (r + g - 2.0 * b) / s6()]
}

pub fn opponent_to_rgb(o: [f64; 3]) -> [f64; 3] {
    let [l, a, c] = o;
    [
        l / s3() + a / S2 + c / s6(),
        l / s3() - a / S2 + c / s6(),
        l / s3() - 2.0 * c / s6(),
    ]
}

/// Target per-channel statistics in opponent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainReference {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl StainReference {
    /// Statistics of a template patch.
    pub fn from_patch(template: &ImagePatch) -> StainReference {
        let (mean, std) = opponent_stats(template);
        StainReference { mean, std }
    }
}

fn opponent_stats(p: &ImagePatch) -> ([f64; 3], [f64; 3]) {
    let n = (p.height * p.width) as f64;
    let ops: Vec<[f64; 3]> = p
        .pixels
        .chunks_exact(3)
        .map(|px| rgb_to_opponent([px[0] as f64, px[1] as f64, px[2] as f64]))
        .collect();
    let mean: [f64; 3] = std::array::from_fn(|c| ops.iter().map(|o| o[c]).sum::<f64>() / n);
    let std: [f64; 3] = std::array::from_fn(|c| (ops.iter().map(|o| (o[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt());
    (mean, std)
}

/// The transformed pixels before clipping, interleaved RGB in f64.
pub fn stain_normalize_unclipped(patch: &ImagePatch, target: &StainReference) -> Result<Vec<f64>> {
    let (mean, std) = opponent_stats(patch);
    if let Some(c) = std.iter().position(|&s| !(s > 1e-9)) {
        return Err(Error::DegenerateStats(format!("opponent channel {c} of the source patch is constant")));
    }
    let scale: [f64; 3] = std::array::from_fn(|c| target.std[c] / std[c]);
    let mut out = Vec::with_capacity(patch.pixels.len());
    for px in patch.pixels.chunks_exact(3) {
        let o = rgb_to_opponent([px[0] as f64, px[1] as f64, px[2] as f64]);
        let t: [f64; 3] = std::array::from_fn(|c| (o[c] - mean[c]) * scale[c] + target.mean[c]);
        out.extend(opponent_to_rgb(t));
    }
    Ok(out)
}

pub fn stain_normalize(patch: &ImagePatch, target: &StainReference) -> Result<ImagePatch> {
    let raw = stain_normalize_unclipped(patch, target)?;
    patch.with_pixels(patch.height, patch.width, raw.into_iter().map(|v| v.clamp(0.0, 255.0) as f32).collect())
}
