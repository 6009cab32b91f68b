use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Label;

/// One RGB cell image, interleaved `H x W x 3`, values on the 0..=255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub label: Label,
    pub patient_id: String,
    pub source_path: PathBuf,
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, label: Label) -> Result<ImagePatch> {
        if height == 0 || width == 0 {
            return Err(Error::Format(format!("patch has zero dimension {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Format(format!(
                "{height}x{width}x3 patch needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(ImagePatch {
            height,
            width,
            pixels,
            label,
            patient_id: "unknown".into(),
            source_path: PathBuf::new(),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3], label: Label) -> Result<ImagePatch> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        ImagePatch::new(height, width, pixels, label)
    }

    /// Same metadata, new pixel grid.
    pub fn with_pixels(&self, height: usize, width: usize, pixels: Vec<f32>) -> Result<ImagePatch> {
        let mut p = ImagePatch::new(height, width, pixels, self.label)?;
        p.patient_id.clone_from(&self.patient_id);
        p.source_path.clone_from(&self.source_path);
        Ok(p)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// `[3, H, W]` planar copy.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    pub fn clamp_to_range(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Stacks patches of identical size into an `(N, 3, H, W)` tensor.
pub fn patches_to_tensor(patches: &[&ImagePatch]) -> Result<Tensor> {
    let first = patches.first().ok_or_else(|| Error::Shape("no patches".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(patches.len() * 3 * h * w);
    for p in patches {
        if (p.height, p.width) != (h, w) {
            return Err(Error::Shape(format!("patch {}x{} in a {h}x{w} batch", p.height, p.width)));
        }
        data.extend(p.to_chw());
    }
    Tensor::from_vec(&[patches.len(), 3, h, w], data)
}

/// Reads an 8-bit image file as an RGB patch. Alpha is dropped and grey
/// images are expanded to three channels.
pub fn read_patch(path: &Path, label: Label) -> Result<ImagePatch> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut p = ImagePatch::new(h as usize, w as usize, rgb.into_raw().into_iter().map(f32::from).collect(), label)?;
    p.source_path = path.to_path_buf();
    Ok(p)
}

/// Writes a patch as an 8-bit PNG (values rounded and clamped).
pub fn write_png(patch: &ImagePatch, path: &Path) -> Result<()> {
    image::save_buffer_with_format(
        path,
        &patch.to_rgb8(),
        patch.width as u32,
        patch.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
