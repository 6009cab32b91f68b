//! Synthetic stained-cell patches for desk-scale experiments.
//!
//! Each patch is a tinted disk (the cell) on a black background. Parasitized
//! cells carry one to three small dark-violet blobs; uninfected cells may
//! carry larger, pale artefacts. Task B is a shifted domain: a different
//! stain tint, smaller and fainter parasites, and more artefacts.

use serde::{Deserialize, Serialize};

use crate::data::patch::ImagePatch;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    A,
    B,
}

struct Style {
    cell_rgb: [f64; 3],
    tint_jitter: f64,
    parasite_rgb: [f64; 3],
    parasite_radius: (f64, f64),
    parasite_strength: (f64, f64),
    artefact_rgb: [f64; 3],
    artefact_probability: f64,
    noise: f64,
}

impl SynthTask {
    fn style(self) -> Style {
        match self {
            SynthTask::A => Style {
                cell_rgb: [215.0, 150.0, 165.0],
                tint_jitter: 25.0,
                parasite_rgb: [90.0, 30.0, 120.0],
                parasite_radius: (0.07, 0.12),
                parasite_strength: (0.75, 1.0),
                artefact_rgb: [235.0, 200.0, 215.0],
                artefact_probability: 0.4,
                noise: 4.0,
            },
            SynthTask::B => Style {
                cell_rgb: [190.0, 165.0, 200.0],
                tint_jitter: 30.0,
                parasite_rgb: [70.0, 40.0, 140.0],
                parasite_radius: (0.05, 0.09),
                parasite_strength: (0.55, 0.9),
                artefact_rgb: [150.0, 120.0, 170.0],
                artefact_probability: 0.7,
                noise: 6.0,
            },
        }
    }
}

fn paint_disk(px: &mut [f64], n: usize, (cx, cy, r): (f64, f64, f64), rgb: [f64; 3], alpha: f64) {
    for y in 0..n {
        for x in 0..n {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            // One-pixel soft edge.
            let a = alpha * (r + 0.5 - d).clamp(0.0, 1.0);
            if a > 0.0 {
                let i = (y * n + x) * 3;
                for c in 0..3 {
                    px[i + c] = (1.0 - a) * px[i + c] + a * rgb[c];
                }
            }
        }
    }
}

/// A point inside the disk `(cx, cy, r)` at most `frac * r` from the centre.
fn inside(s: &mut RngStream, (cx, cy, r): (f64, f64, f64), frac: f64) -> (f64, f64) {
    let ang = s.uniform(0.0, std::f64::consts::TAU);
    let rad = frac * r * s.next_f64().sqrt();
    (cx + rad * ang.cos(), cy + rad * ang.sin())
}

/// One `size x size` cell drawn from its own stream.
pub fn synth_cell(task: SynthTask, label: Label, size: usize, s: &mut RngStream) -> Result<ImagePatch> {
    if size < 8 {
        return Err(Error::Param(format!("synthetic cells need size >= 8, got {size}")));
    }
    let st = task.style();
    let n = size;
    let nf = n as f64;
    let mut px = vec![0.0f64; n * n * 3];
    let cell = (
        nf / 2.0 + s.uniform(-0.05, 0.05) * nf,
        nf / 2.0 + s.uniform(-0.05, 0.05) * nf,
        s.uniform(0.36, 0.46) * nf,
    );
    let tint: [f64; 3] = std::array::from_fn(|c| st.cell_rgb[c] + s.uniform(-st.tint_jitter, st.tint_jitter));
    paint_disk(&mut px, n, cell, tint, 1.0);
    if s.bernoulli(st.artefact_probability) {
        let (x, y) = inside(s, cell, 0.6);
        let r = s.uniform(0.10, 0.16) * nf;
        paint_disk(&mut px, n, (x, y, r), st.artefact_rgb, s.uniform(0.4, 0.7));
    }
    if label.is_positive() {
        let count = 1 + s.below(3);
        for _ in 0..count {
            let (x, y) = inside(s, cell, 0.7);
            let r = s.uniform(st.parasite_radius.0, st.parasite_radius.1) * nf;
            let a = s.uniform(st.parasite_strength.0, st.parasite_strength.1);
            paint_disk(&mut px, n, (x, y, r.max(1.0)), st.parasite_rgb, a);
        }
    }
    for p in px.chunks_exact_mut(3) {
        let e = st.noise * s.standard_normal();
        p.iter_mut().for_each(|v| *v = (*v + e).clamp(0.0, 255.0));
    }
    ImagePatch::new(n, n, px.into_iter().map(|v| v as f32).collect(), label)
}

/// `count` cells alternating uninfected/parasitized, sample `i` drawn from
/// a stream derived from `(seed, i)`.
pub fn generate_cells(task: SynthTask, count: usize, size: usize, seed: u64) -> Result<Vec<ImagePatch>> {
    let root = RngStream::new(seed, 0x5359_4e54 + task as u64);
    (0..count)
        .map(|i| {
            let label = Label::from_index(i % 2);
            let mut p = synth_cell(task, label, size, &mut root.derive(i as u64))?;
            p.patient_id = format!("synth{:03}", i % 50);
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = generate_cells(SynthTask::A, 10, 32, 1).unwrap();
        let b = generate_cells(SynthTask::A, 10, 32, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|p| p.label.is_positive()).count(), 5);
        assert!(a.iter().all(|p| p.pixels.iter().all(|v| (0.0..=255.0).contains(v))));
        assert_ne!(a, generate_cells(SynthTask::B, 10, 32, 1).unwrap());
    }

    #[test]
    fn parasites_darken_the_cell() {
        let cells = generate_cells(SynthTask::A, 200, 32, 2).unwrap();
        let min_green = |p: &ImagePatch| {
            // Darkest green inside the central region, where the cell is.
            let mut m = f32::MAX;
            for y in 10..22 {
                for x in 10..22 {
                    m = m.min(p.at(y, x, 1));
                }
            }
            m
        };
        let pos: f32 = cells.iter().filter(|p| p.label.is_positive()).map(min_green).sum::<f32>() / 100.0;
        let neg: f32 = cells.iter().filter(|p| !p.label.is_positive()).map(min_green).sum::<f32>() / 100.0;
        assert!(pos + 30.0 < neg, "{pos} vs {neg}");
    }
}
