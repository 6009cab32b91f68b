//! Cell datasets, the fitted preprocessing chain and batch sources.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_sample, mean_normalize, min_max_rescale, patches_to_tensor, read_patch, resample, stain_normalize,
    standardize, variant_stream, AugmentPolicy, ImagePatch, StainReference, StandardizeStats,
};
use crate::error::{Error, Result};
use crate::harness::manifest::Manifest;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::{Blob, SampleSource};
use crate::Label;

const ONLINE_STREAM: u64 = 0x4f4e_4c4e;

/// Cell patches, either held in memory or read from disk on demand.
#[derive(Clone, Debug)]
pub enum CellDataset {
    Memory { patches: Arc<Vec<ImagePatch>> },
    Disk { manifest: Arc<Manifest>, size: usize },
}

impl CellDataset {
    /// In-memory patches, resampled to `size` where needed.
    pub fn from_patches(patches: Vec<ImagePatch>, size: usize) -> Result<CellDataset> {
        let patches = patches
            .into_par_iter()
            .map(|p| if p.height == size && p.width == size { Ok(p) } else { resample(&p, size) })
            .collect::<Result<Vec<_>>>()?;
        Ok(CellDataset::Memory { patches: Arc::new(patches) })
    }

    pub fn from_manifest(manifest: Manifest, size: usize) -> CellDataset {
        CellDataset::Disk {
            manifest: Arc::new(manifest),
            size,
        }
    }

    /// Reads every image of the manifest into memory.
    pub fn load_manifest(manifest: &Manifest, size: usize) -> Result<CellDataset> {
        let disk = CellDataset::from_manifest(manifest.clone(), size);
        let all: Vec<usize> = (0..manifest.len()).collect();
        Ok(CellDataset::Memory {
            patches: Arc::new(disk.patches(&all)?),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            CellDataset::Memory { patches } => patches.len(),
            CellDataset::Disk { manifest, .. } => manifest.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> Label {
        match self {
            CellDataset::Memory { patches } => patches[i].label,
            CellDataset::Disk { manifest, .. } => manifest.rows[i].label,
        }
    }

    pub fn labels(&self) -> Vec<Label> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn patient(&self, i: usize) -> String {
        match self {
            CellDataset::Memory { patches } => patches[i].patient_id.clone(),
            CellDataset::Disk { manifest, .. } => manifest.rows[i].patient_id.clone(),
        }
    }

    pub fn patients(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.patient(i)).collect()
    }

    pub fn patch(&self, i: usize) -> Result<ImagePatch> {
        match self {
            CellDataset::Memory { patches } => Ok(patches[i].clone()),
            CellDataset::Disk { manifest, size } => {
                let row = &manifest.rows[i];
                let mut p = read_patch(&manifest.resolve(row), row.label)?;
                p.patient_id = row.patient_id.clone();
                if p.height != *size || p.width != *size {
                    p = resample(&p, *size)?;
                }
                Ok(p)
            }
        }
    }

    pub fn patches(&self, indices: &[usize]) -> Result<Vec<ImagePatch>> {
        indices.par_iter().map(|&i| self.patch(i)).collect()
    }
}

/// Pixel statistics normalization applied after the `/255` rescale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Rescale only.
    #[default]
    None,
    /// `(x - mu) / sigma` with training-set statistics.
    Standardize,
    /// `(x - mu) / 255` with training-set statistics.
    MeanNormalize,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Normalization> {
        match s {
            "none" => Ok(Normalization::None),
            "standardize" => Ok(Normalization::Standardize),
            "mean-normalize" => Ok(Normalization::MeanNormalize),
            _ => Err(Error::Param(format!(
                "unknown normalization `{s}` (expected none, standardize or mean-normalize)"
            ))),
        }
    }
}

/// Fitted chain: optional stain normalization, `/255`, then optional
/// statistics normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub stain: Option<StainReference>,
    pub normalization: Normalization,
    pub stats: Option<StandardizeStats>,
}

impl Preprocessor {
    /// Fits on the training patches. The stain template is the first
    /// training patch.
    pub fn fit(data: &CellDataset, train: &[usize], stain: bool, normalization: Normalization) -> Result<Preprocessor> {
        let first = *train
            .first()
            .ok_or_else(|| Error::Harness("cannot fit preprocessing on an empty training set".into()))?;
        let mut prep = Preprocessor {
            stain: if stain {
                Some(StainReference::from_patch(&data.patch(first)?))
            } else {
                None
            },
            normalization,
            stats: None,
        };
        if normalization != Normalization::None {
            prep.stats = Some(prep.fit_stats(data, train)?);
        }
        Ok(prep)
    }

    /// Channel statistics of the rescaled (and stain-normalized) training set,
    /// accumulated in chunks so the set need not fit in memory.
    fn fit_stats(&self, data: &CellDataset, train: &[usize]) -> Result<StandardizeStats> {
        let base = Preprocessor {
            normalization: Normalization::None,
            stats: None,
            ..self.clone()
        };
        let chunks: Vec<Result<([f64; 3], [f64; 3], f64)>> = train
            .par_chunks(256)
            .map(|c| {
                let x = base.apply(&data.patches(c)?)?;
                let [n, _, h, w] = x.dims4()?;
                let hw = h * w;
                let mut sum = [0.0; 3];
                let mut sq = [0.0; 3];
                for s in 0..n {
                    for ch in 0..3 {
                        let plane = &x.data()[(s * 3 + ch) * hw..(s * 3 + ch + 1) * hw];
                        for &v in plane {
                            sum[ch] += v as f64;
                            sq[ch] += v as f64 * v as f64;
                        }
                    }
                }
                Ok((sum, sq, (n * hw) as f64))
            })
            .collect();
        let (mut sum, mut sq, mut count) = ([0.0; 3], [0.0; 3], 0.0);
        for c in chunks {
            let (s, q, n) = c?;
            for ch in 0..3 {
                sum[ch] += s[ch];
                sq[ch] += q[ch];
            }
            count += n;
        }
        let mean = sum.map(|s| s / count);
        let std = std::array::from_fn(|c| (sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt());
        Ok(StandardizeStats { mean, std })
    }

    pub fn apply(&self, patches: &[ImagePatch]) -> Result<Tensor> {
        let normalized: Vec<ImagePatch>;
        let refs: Vec<&ImagePatch> = match &self.stain {
            Some(r) => {
                normalized = patches.iter().map(|p| stain_normalize(p, r)).collect::<Result<_>>()?;
                normalized.iter().collect()
            }
            None => patches.iter().collect(),
        };
        let x = min_max_rescale(&patches_to_tensor(&refs)?)?;
        match (self.normalization, &self.stats) {
            (Normalization::None, _) => Ok(x),
            (Normalization::Standardize, Some(s)) => standardize(&x, s),
            (Normalization::MeanNormalize, Some(s)) => mean_normalize(&x, s),
            _ => Err(Error::Param("normalization statistics were not fitted".into())),
        }
    }

    pub fn to_aux(&self) -> Vec<(String, Blob)> {
        let mut flags = vec![
            self.stain.is_some() as u8 as f64,
            match self.normalization {
                Normalization::None => 0.0,
                Normalization::Standardize => 1.0,
                Normalization::MeanNormalize => 2.0,
            },
        ];
        if let Some(r) = &self.stain {
            flags.extend(r.mean.iter().chain(&r.std));
        } else {
            flags.extend([0.0; 6]);
        }
        if let Some(s) = &self.stats {
            flags.extend(s.mean.iter().chain(&s.std));
        } else {
            flags.extend([0.0; 6]);
        }
        vec![(
            "prep".into(),
            Blob::F64 {
                shape: vec![flags.len()],
                data: flags,
            },
        )]
    }

    /// Rebuilds the chain from checkpoint aux records; rescale-only when
    /// absent.
    pub fn from_aux(aux: &[(String, Blob)]) -> Result<Preprocessor> {
        let Some((_, blob)) = aux.iter().find(|(n, _)| n == "prep") else {
            return Ok(Preprocessor {
                stain: None,
                normalization: Normalization::None,
                stats: None,
            });
        };
        let Blob::F64 { data: d, .. } = blob else {
            return Err(Error::Format("prep record must be f64".into()));
        };
        if d.len() != 14 {
            return Err(Error::Format("prep record must hold 14 values".into()));
        }
        let arr = |o: usize| -> [f64; 3] { [d[o], d[o + 1], d[o + 2]] };
        let normalization = match d[1] as u8 {
            0 => Normalization::None,
            1 => Normalization::Standardize,
            2 => Normalization::MeanNormalize,
            v => return Err(Error::Format(format!("unknown normalization code {v}"))),
        };
        Ok(Preprocessor {
            stain: (d[0] != 0.0).then(|| StainReference { mean: arr(2), std: arr(5) }),
            normalization,
            stats: (normalization != Normalization::None).then(|| StandardizeStats { mean: arr(8), std: arr(11) }),
        })
    }
}

/// How training samples are augmented.
#[derive(Clone, Debug, PartialEq)]
pub enum Augmentation {
    None,
    /// A fresh variant per sample and epoch.
    Online { policy: AugmentPolicy, seed: u64 },
    /// `copies` fixed variants per sample, drawn once and reused every epoch.
    Offline { policy: AugmentPolicy, seed: u64, copies: usize },
}

/// A subset of a dataset passed through a fitted preprocessor.
#[derive(Clone, Debug)]
pub struct PatchSource {
    pub data: CellDataset,
    pub indices: Vec<usize>,
    pub prep: Arc<Preprocessor>,
    pub augmentation: Augmentation,
}

impl PatchSource {
    pub fn new(data: &CellDataset, indices: &[usize], prep: Arc<Preprocessor>) -> PatchSource {
        PatchSource {
            data: data.clone(),
            indices: indices.to_vec(),
            prep,
            augmentation: Augmentation::None,
        }
    }

    pub fn with_augmentation(mut self, augmentation: Augmentation) -> PatchSource {
        self.augmentation = augmentation;
        self
    }

    fn copies(&self) -> usize {
        match self.augmentation {
            Augmentation::Offline { copies, .. } => copies + 1,
            _ => 1,
        }
    }

    /// Dataset index of sample `i` of this source.
    pub fn dataset_index(&self, i: usize) -> usize {
        self.indices[i / self.copies()]
    }

    fn render(&self, i: usize, epoch: Option<usize>) -> Result<ImagePatch> {
        let k = self.copies();
        let base = self.indices[i / k];
        let patch = self.data.patch(base)?;
        match (&self.augmentation, epoch) {
            (Augmentation::Offline { policy, seed, .. }, _) if i % k > 0 => {
                augment_sample(&patch, policy, &mut variant_stream(*seed, base, i % k))
            }
            (Augmentation::Online { policy, seed }, Some(e)) => {
                let mut s = RngStream::new(*seed, ONLINE_STREAM).derive(base as u64).derive(e as u64);
                augment_sample(&patch, policy, &mut s)
            }
            _ => Ok(patch),
        }
    }

    fn assemble(&self, indices: &[usize], epoch: Option<usize>) -> Result<Tensor> {
        let patches: Vec<ImagePatch> = indices.par_iter().map(|&i| self.render(i, epoch)).collect::<Result<_>>()?;
        self.prep.apply(&patches)
    }
}

impl SampleSource for PatchSource {
    fn len(&self) -> usize {
        self.indices.len() * self.copies()
    }

    fn label(&self, index: usize) -> Label {
        self.data.label(self.dataset_index(index))
    }

    fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        self.assemble(indices, None)
    }

    fn train_batch(&self, indices: &[usize], epoch: usize) -> Result<Tensor> {
        self.assemble(indices, Some(epoch))
    }
}
