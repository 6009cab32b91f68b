//! Binary cross-entropy on the positive-class probability of a 2-way softmax.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use crate::Label;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// `-(y ln p + (1 - y) ln(1 - p))` with clamped `p`.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Output of [`softmax_bce`].
pub struct SoftmaxBce {
    pub mean_loss: f64,
    pub per_sample: Vec<f64>,
    /// Gradient of the mean loss w.r.t. the two logits of each row.
    pub grad_logits: Tensor,
}

/// Mean BCE over a batch of softmax outputs `(batch, 2)`. With
/// `p = softmax(z)[1]` the logit gradient is `(p - y) * (-1, 1) / batch`
/// (the gradient of the unclamped loss).
pub fn softmax_bce(probs: &Tensor, labels: &[Label]) -> Result<SoftmaxBce> {
    let [n, k] = probs.dims2()?;
    if k != 2 || n != labels.len() {
        return shape_err(format!("softmax_bce: probs {:?} vs {} labels", probs.shape(), labels.len()));
    }
    let mut per_sample = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(2 * n);
    for (row, label) in probs.data().chunks(2).zip(labels) {
        let y = label.as_index() as f64;
        let p = row[1] as f64;
        per_sample.push(bce(p, y));
        let d = ((p - y) / n as f64) as f32;
        grad.push(-d);
        grad.push(d);
    }
    let mean_loss = per_sample.iter().sum::<f64>() / n as f64;
    Ok(SoftmaxBce {
        mean_loss,
        per_sample,
        grad_logits: Tensor::from_vec(&[n, 2], grad)?,
    })
}
