//! Randomised augmentation.
//!
//! Parameters are drawn in a fixed order (so every sample consumes the same
//! number of draws whatever the policy), then the ops are applied in a
//! shuffled order. Pixel values are clipped to `[0, 255]` after every op;
//! geometric ops fill uncovered pixels with black.

use serde::{Deserialize, Serialize};

use crate::data::patch::ImagePatch;
use crate::data::resample::resample_to;
use crate::error::{Error, Result};
use crate::harness::manifest::ManifestRow;
use crate::rng::RngStream;
use crate::Label;

const AUGMENT_STREAM: u64 = 0x4155_474d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Probability of each of the horizontal and vertical flips.
    pub flip_probability: f64,
    /// Contrast factor `a` in `128 + a (v - 128)`.
    pub contrast: (f64, f64),
    /// Fraction cropped from each side before resizing back.
    pub crop: (f64, f64),
    pub rotate_degrees: (f64, f64),
    /// Shift as a fraction of width and height.
    pub translate_x: (f64, f64),
    pub translate_y: (f64, f64),
    pub shear_degrees: (f64, f64),
    pub color_probability: f64,
    /// Hue rotation applied in HSV space.
    pub hue_shift_degrees: (f64, f64),
    pub blur_probability: f64,
    pub blur_sigma: (f64, f64),
    /// Standard deviation of additive noise, sampled once per pixel.
    pub noise_sigma: (f64, f64),
    /// Dataset-level colour whitening after augmentation.
    pub zca: bool,
    /// Dataset-level per-channel standardisation after augmentation.
    pub featurewise_std: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_probability: 0.5,
            contrast: (0.5, 1.5),
            crop: (0.0, 0.2),
            rotate_degrees: (-25.0, 25.0),
            translate_x: (-0.2, 0.2),
            translate_y: (-0.2, 0.2),
            shear_degrees: (-25.0, 25.0),
            color_probability: 0.5,
            hue_shift_degrees: (-10.0, 10.0),
            blur_probability: 0.5,
            blur_sigma: (0.5, 1.5),
            noise_sigma: (0.0, 0.05 * 255.0),
            zca: false,
            featurewise_std: false,
        }
    }
}

impl AugmentPolicy {
    /// Every range collapsed onto its no-op value.
    pub fn identity() -> AugmentPolicy {
        AugmentPolicy {
            flip_probability: 0.0,
            contrast: (1.0, 1.0),
            crop: (0.0, 0.0),
            rotate_degrees: (0.0, 0.0),
            translate_x: (0.0, 0.0),
            translate_y: (0.0, 0.0),
            shear_degrees: (0.0, 0.0),
            color_probability: 0.0,
            hue_shift_degrees: (0.0, 0.0),
            blur_probability: 0.0,
            blur_sigma: (0.0, 0.0),
            noise_sigma: (0.0, 0.0),
            zca: false,
            featurewise_std: false,
        }
    }

    /// Only rotation, in the given range.
    pub fn rotation_only(lo: f64, hi: f64) -> AugmentPolicy {
        AugmentPolicy {
            rotate_degrees: (lo, hi),
            ..AugmentPolicy::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("contrast", self.contrast),
            ("crop", self.crop),
            ("rotate_degrees", self.rotate_degrees),
            ("translate_x", self.translate_x),
            ("translate_y", self.translate_y),
            ("shear_degrees", self.shear_degrees),
            ("hue_shift_degrees", self.hue_shift_degrees),
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma", self.noise_sigma),
        ];
        let mut bad: Vec<String> = ranges
            .iter()
            .filter(|(_, (lo, hi))| !(lo <= hi) || !lo.is_finite() || !hi.is_finite())
            .map(|(n, r)| format!("{n} {r:?}"))
            .collect();
        for (n, p) in [
            ("flip_probability", self.flip_probability),
            ("color_probability", self.color_probability),
            ("blur_probability", self.blur_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(format!("{n} {p}"));
            }
        }
        if self.contrast.0 < 0.0 || self.crop.0 < 0.0 || self.crop.1 >= 0.5 || self.blur_sigma.0 < 0.0 || self.noise_sigma.0 < 0.0 {
            bad.push("negative factor or crop >= 0.5".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(format!("invalid augmentation policy: {}", bad.join(", "))))
        }
    }

    /// True when `params` lies inside every range of this policy.
    pub fn contains(&self, p: &AugmentParams) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| lo <= v && (v < hi || (lo == hi && v == lo));
        inside(p.contrast, self.contrast)
            && p.crop.iter().all(|&c| inside(c, self.crop))
            && inside(p.rotate_degrees, self.rotate_degrees)
            && inside(p.translate.0, self.translate_x)
            && inside(p.translate.1, self.translate_y)
            && inside(p.shear_degrees, self.shear_degrees)
            && p.hue_shift_degrees.is_none_or(|h| inside(h, self.hue_shift_degrees))
            && p.blur_sigma.is_none_or(|s| inside(s, self.blur_sigma))
            && inside(p.noise_sigma, self.noise_sigma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentOp {
    HorizontalFlip,
    VerticalFlip,
    Contrast,
    Crop,
    Rotate,
    Translate,
    Shear,
    ColorSpace,
    Blur,
    Noise,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 10] = [
        AugmentOp::HorizontalFlip,
        AugmentOp::VerticalFlip,
        AugmentOp::Contrast,
        AugmentOp::Crop,
        AugmentOp::Rotate,
        AugmentOp::Translate,
        AugmentOp::Shear,
        AugmentOp::ColorSpace,
        AugmentOp::Blur,
        AugmentOp::Noise,
    ];
}

/// One concrete draw from a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub contrast: f64,
    /// Top, right, bottom, left.
    pub crop: [f64; 4],
    pub rotate_degrees: f64,
    pub translate: (f64, f64),
    pub shear_degrees: f64,
    pub hue_shift_degrees: Option<f64>,
    pub blur_sigma: Option<f64>,
    pub noise_sigma: f64,
    pub order: Vec<AugmentOp>,
}

fn draw(s: &mut RngStream, (lo, hi): (f64, f64)) -> f64 {
    s.uniform(lo, hi)
}

pub fn sample_params(policy: &AugmentPolicy, s: &mut RngStream) -> AugmentParams {
    let hflip = s.bernoulli(policy.flip_probability);
    let vflip = s.bernoulli(policy.flip_probability);
    let contrast = draw(s, policy.contrast);
    let crop = [(); 4].map(|_| draw(s, policy.crop));
    let rotate_degrees = draw(s, policy.rotate_degrees);
    let translate = (draw(s, policy.translate_x), draw(s, policy.translate_y));
    let shear_degrees = draw(s, policy.shear_degrees);
    let color = s.bernoulli(policy.color_probability);
    let hue = draw(s, policy.hue_shift_degrees);
    let blur = s.bernoulli(policy.blur_probability);
    let sigma = draw(s, policy.blur_sigma);
    let noise_sigma = draw(s, policy.noise_sigma);
    let mut order = AugmentOp::ALL.to_vec();
    s.shuffle(&mut order);
    AugmentParams {
        hflip,
        vflip,
        contrast,
        crop,
        rotate_degrees,
        translate,
        shear_degrees,
        hue_shift_degrees: color.then_some(hue),
        blur_sigma: blur.then_some(sigma),
        noise_sigma,
        order,
    }
}

/// Samples parameters from `policy` and applies them. Per-pixel noise is
/// drawn from the same stream after the parameters.
pub fn augment_sample(patch: &ImagePatch, policy: &AugmentPolicy, stream: &mut RngStream) -> Result<ImagePatch> {
    let params = sample_params(policy, stream);
    apply_params(patch, &params, stream)
}

pub fn apply_params(patch: &ImagePatch, p: &AugmentParams, stream: &mut RngStream) -> Result<ImagePatch> {
    let mut img = patch.clone();
    for op in &p.order {
        img = match op {
            AugmentOp::HorizontalFlip if p.hflip => flip(&img, true)?,
            AugmentOp::VerticalFlip if p.vflip => flip(&img, false)?,
            AugmentOp::Contrast if p.contrast != 1.0 => map_values(&img, |v| 128.0 + p.contrast * (v - 128.0))?,
            AugmentOp::Crop if p.crop.iter().any(|&c| c > 0.0) => crop_resize(&img, p.crop)?,
            AugmentOp::Rotate if p.rotate_degrees != 0.0 => {
                let (s, c) = p.rotate_degrees.to_radians().sin_cos();
                // Inverse of a rotation by +angle.
                warp(&img, [[c, s], [-s, c]], (0.0, 0.0))?
            }
            AugmentOp::Translate if p.translate != (0.0, 0.0) => {
                let shift = (p.translate.0 * img.width as f64, p.translate.1 * img.height as f64);
                warp(&img, [[1.0, 0.0], [0.0, 1.0]], (-shift.0, -shift.1))?
            }
            AugmentOp::Shear if p.shear_degrees != 0.0 => {
                let t = p.shear_degrees.to_radians().tan();
                warp(&img, [[1.0, -t], [0.0, 1.0]], (0.0, 0.0))?
            }
            AugmentOp::ColorSpace => match p.hue_shift_degrees {
                Some(h) if h != 0.0 => hue_shift(&img, h)?,
                _ => img,
            },
            AugmentOp::Blur => match p.blur_sigma {
                Some(s) if s > 0.0 => gaussian_blur(&img, s)?,
                _ => img,
            },
            AugmentOp::Noise if p.noise_sigma > 0.0 => {
                let mut out = img;
                for px in out.pixels.chunks_exact_mut(3) {
                    let n = (p.noise_sigma * stream.standard_normal()) as f32;
                    px.iter_mut().for_each(|v| *v = (*v + n).clamp(0.0, 255.0));
                }
                out
            }
            _ => img,
        };
    }
    Ok(img)
}

fn flip(img: &ImagePatch, horizontal: bool) -> Result<ImagePatch> {
    let (h, w) = (img.height, img.width);
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            out.extend_from_slice(&img.pixels[(sy * w + sx) * 3..(sy * w + sx) * 3 + 3]);
        }
    }
    img.with_pixels(h, w, out)
}

fn map_values(img: &ImagePatch, f: impl Fn(f64) -> f64) -> Result<ImagePatch> {
    img.with_pixels(
        img.height,
        img.width,
        img.pixels.iter().map(|&v| f(v as f64).clamp(0.0, 255.0) as f32).collect(),
    )
}

fn crop_resize(img: &ImagePatch, [top, right, bottom, left]: [f64; 4]) -> Result<ImagePatch> {
    let (h, w) = (img.height, img.width);
    let t = (top * h as f64).round() as usize;
    let b = (bottom * h as f64).round() as usize;
    let l = (left * w as f64).round() as usize;
    let r = (right * w as f64).round() as usize;
    if t + b >= h || l + r >= w {
        return Ok(img.clone());
    }
    if t + b + l + r == 0 {
        return Ok(img.clone());
    }
    let (ch, cw) = (h - t - b, w - l - r);
    let mut px = Vec::with_capacity(ch * cw * 3);
    for y in t..t + ch {
        px.extend_from_slice(&img.pixels[(y * w + l) * 3..(y * w + l + cw) * 3]);
    }
    resample_to(&img.with_pixels(ch, cw, px)?, h, w)
}

/// Inverse-mapped affine warp about the image centre: destination pixel `d`
/// samples the source at `m (d - c) + c + offset`.
fn warp(img: &ImagePatch, m: [[f64; 2]; 2], offset: (f64, f64)) -> Result<ImagePatch> {
    let (h, w) = (img.height, img.width);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let fetch = |y: isize, x: isize, c: usize| -> f64 {
        if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
            0.0
        } else {
            img.at(y as usize, x as usize, c) as f64
        }
    };
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = m[0][0] * dx + m[0][1] * dy + cx + offset.0;
            let sy = m[1][0] * dx + m[1][1] * dy + cy + offset.1;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..3 {
                let v = (fetch(y0, x0, c) * (1.0 - fx) + fetch(y0, x0 + 1, c) * fx) * (1.0 - fy)
                    + (fetch(y0 + 1, x0, c) * (1.0 - fx) + fetch(y0 + 1, x0 + 1, c) * fx) * fy;
                out.push(v.clamp(0.0, 255.0) as f32);
            }
        }
    }
    img.with_pixels(h, w, out)
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn hue_shift(img: &ImagePatch, degrees: f64) -> Result<ImagePatch> {
    let mut out = Vec::with_capacity(img.pixels.len());
    for px in img.pixels.chunks_exact(3) {
        let [h, s, v] = rgb_to_hsv([px[0] as f64, px[1] as f64, px[2] as f64]);
        out.extend(hsv_to_rgb([h + degrees, s, v]).map(|c| c.clamp(0.0, 255.0) as f32));
    }
    img.with_pixels(img.height, img.width, out)
}

fn gaussian_blur(img: &ImagePatch, sigma: f64) -> Result<ImagePatch> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (k, &wt) in kernel.iter().enumerate() {
                        let o = k as isize - radius;
                        let (sy, sx) = if horizontal {
                            (y, (x + o).clamp(0, w - 1))
                        } else {
                            ((y + o).clamp(0, h - 1), x)
                        };
                        acc += wt * src[((sy * w + sx) * 3) as usize + c] as f64;
                    }
                    dst[((y * w + x) * 3) as usize + c] = acc as f32;
                }
            }
        }
        dst
    };
    let tmp = pass(&img.pixels, true);
    img.with_pixels(img.height, img.width, pass(&tmp, false))
}

/// One row of an expanded training manifest: variant 0 is the original,
/// variants `1..=copies` are augmented with the row's own stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedRow {
    pub source: usize,
    pub variant: usize,
    pub label: Label,
    pub seed: u64,
    pub stream_id: u64,
}

impl AugmentedRow {
    pub fn stream(&self) -> RngStream {
        RngStream::new(self.seed, self.stream_id)
    }

    /// The pixels of this variant given the source patch.
    pub fn render(&self, patch: &ImagePatch, policy: &AugmentPolicy) -> Result<ImagePatch> {
        if self.variant == 0 {
            return Ok(patch.clone());
        }
        augment_sample(patch, policy, &mut self.stream())
    }
}

/// Stream used for variant `variant` of row `row`.
pub fn variant_stream(seed: u64, row: usize, variant: usize) -> RngStream {
    RngStream::new(seed, AUGMENT_STREAM).derive(row as u64).derive(variant as u64)
}

/// Each row followed by `copies` augmented variants.
pub fn expand_training_set(rows: &[ManifestRow], copies: usize, policy: &AugmentPolicy, seed: u64) -> Result<Vec<AugmentedRow>> {
    if copies == 0 {
        return Err(Error::Param("copies must be >= 1".into()));
    }
    policy.validate()?;
    let mut out = Vec::with_capacity(rows.len() * (copies + 1));
    for (i, row) in rows.iter().enumerate() {
        for v in 0..=copies {
            let s = variant_stream(seed, i, v);
            out.push(AugmentedRow {
                source: i,
                variant: v,
                label: row.label,
                seed: s.seed(),
                stream_id: s.stream_id(),
            });
        }
    }
    Ok(out)
}
