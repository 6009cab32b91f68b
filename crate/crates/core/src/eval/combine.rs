//! Ensemble and test-time-augmentation combiners over (p_neg, p_pos) vectors.

use rayon::prelude::*;

use crate::data::{augment_sample, AugmentPolicy, ImagePatch};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::Label;

pub type ProbPair = [f64; 2];

pub fn one_hot(label: Label) -> ProbPair {
    if label.is_positive() {
        [0.0, 1.0]
    } else {
        [1.0, 0.0]
    }
}

pub fn argmax_label(p: &ProbPair) -> Label {
    if p[1] >= 0.5 {
        Label::Parasitized
    } else {
        Label::Uninfected
    }
}

/// Weighted mean written as `v0 + sum_k w_k (v_k - v0) / W`, so that equal
/// members and one-hot weightings return a member's output exactly.
fn weighted_mean(rows: &[ProbPair], weights: &[f64], total: f64) -> ProbPair {
    let v0 = rows[0];
    let mut out = [0.0; 2];
    for (c, o) in out.iter_mut().enumerate() {
        let shift: f64 = rows.iter().zip(weights).map(|(r, w)| w * (r[c] - v0[c])).sum();
        *o = v0[c] + shift / total;
    }
    out
}

/// Validated ensemble weights; equal weights when `weights` is `None`.
pub fn ensemble_weights(models: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if models < 2 {
        return Err(Error::Param(format!("an ensemble needs at least 2 models, got {models}")));
    }
    let w = weights.map_or_else(|| vec![1.0; models], <[f64]>::to_vec);
    if w.len() != models {
        return Err(Error::Param(format!("{} weights for {models} models", w.len())));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Param("ensemble weights must be finite and non-negative".into()));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Param("ensemble weights are all zero".into()));
    }
    Ok(w)
}

/// Combines per-model prediction lists (`members[k][i]` is model `k` on
/// sample `i`) by weighted average.
pub fn ensemble_predict(members: &[Vec<ProbPair>], weights: Option<&[f64]>) -> Result<Vec<ProbPair>> {
    let w = ensemble_weights(members.len(), weights)?;
    let n = members[0].len();
    if let Some(m) = members.iter().find(|m| m.len() != n) {
        return Err(Error::Param(format!("ensemble members predict {} and {} samples", n, m.len())));
    }
    let total: f64 = w.iter().sum();
    Ok((0..n)
        .map(|i| {
            let rows: Vec<ProbPair> = members.iter().map(|m| m[i]).collect();
            weighted_mean(&rows, &w, total)
        })
        .collect())
}

/// Weights proportional to each member's validation accuracy.
pub fn accuracy_weights(accuracies: &[f64]) -> Result<Vec<f64>> {
    ensemble_weights(accuracies.len(), Some(accuracies))
}

/// Mean softmax output over each patch and `k` seeded augmentations of it.
/// Variant `j` of patch `i` draws from `stream.derive(i).derive(j)`; variant
/// 0 is the unmodified patch. Each variant set is evaluated in batches of
/// `batch_size` patches, matching a plain prediction pass.
pub fn tta_predict(
    model: &ModelGraph,
    patches: &[ImagePatch],
    k: usize,
    policy: &AugmentPolicy,
    stream: &RngStream,
    prepare: &(dyn Fn(&[ImagePatch]) -> Result<Tensor> + Sync),
    batch_size: usize,
) -> Result<Vec<ProbPair>> {
    if k == 0 {
        return Err(Error::Param("test-time augmentation needs k >= 1".into()));
    }
    policy.validate()?;
    let variants: Vec<Vec<ProbPair>> = (0..=k)
        .map(|j| {
            let chunks: Vec<Result<Vec<ProbPair>>> = (0..patches.len())
                .collect::<Vec<_>>()
                .par_chunks(batch_size.max(1))
                .map(|c| {
                    let batch: Vec<ImagePatch> = c
                        .iter()
                        .map(|&i| {
                            if j == 0 {
                                Ok(patches[i].clone())
                            } else {
                                augment_sample(&patches[i], policy, &mut stream.derive(i as u64).derive(j as u64))
                            }
                        })
                        .collect::<Result<_>>()?;
                    let probs = model.predict(&prepare(&batch)?)?;
                    Ok(probs.data().chunks(2).map(|p| [p[0] as f64, p[1] as f64]).collect())
                })
                .collect();
            let mut out = Vec::with_capacity(patches.len());
            for c in chunks {
                out.extend(c?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let w = vec![1.0; k + 1];
    Ok((0..patches.len())
        .map(|i| {
            let rows: Vec<ProbPair> = variants.iter().map(|v| v[i]).collect();
            weighted_mean(&rows, &w, (k + 1) as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consensus_and_degenerate_weights() {
        let v = [0.3, 0.7];
        let out = ensemble_predict(&[vec![v], vec![v], vec![v]], None).unwrap();
        assert_eq!(out, vec![v]);
        let out = ensemble_predict(&[vec![[0.1, 0.9]], vec![[0.8, 0.2]], vec![[0.5, 0.5]]], Some(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(out, vec![[0.1, 0.9]]);
    }

    #[test]
    fn two_model_average() {
        let out = ensemble_predict(&[vec![[0.6, 0.4]], vec![[0.2, 0.8]]], None).unwrap();
        assert!((out[0][0] - 0.4).abs() < 1e-15 && (out[0][1] - 0.6).abs() < 1e-15);
        assert_eq!(argmax_label(&out[0]), Label::Parasitized);
    }

    #[test]
    fn invalid_inputs() {
        assert!(ensemble_predict(&[vec![[0.5, 0.5]]], None).is_err());
        assert!(ensemble_predict(&[vec![[0.5, 0.5]], vec![]], None).is_err());
        assert!(ensemble_predict(&[vec![[0.5, 0.5]], vec![[0.5, 0.5]]], Some(&[0.0, 0.0])).is_err());
        assert!(ensemble_predict(&[vec![[0.5, 0.5]], vec![[0.5, 0.5]]], Some(&[1.0, -1.0])).is_err());
        assert!(ensemble_predict(&[vec![[0.5, 0.5]], vec![[0.5, 0.5]]], Some(&[1.0])).is_err());
    }
}
