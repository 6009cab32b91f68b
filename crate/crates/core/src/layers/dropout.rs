//! Inverted dropout: survivors are scaled by 1/(1-rate) at train time so the
//! eval-mode pass is the identity.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::model::Mode;

/// Per-element multiplier: 0 for dropped elements, 1/(1-rate) otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask(pub Vec<f32>);

pub fn check_rate(rate: f32) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::Param(format!("dropout rate {rate} outside (0, 1)")))
    }
}

pub fn sample_mask(len: usize, rate: f32, stream: &mut RngStream) -> Result<DropoutMask> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    Ok(DropoutMask(
        (0..len)
            .map(|_| if stream.bernoulli(rate as f64) { 0.0 } else { keep })
            .collect(),
    ))
}

impl DropoutMask {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.0.len() {
            return Err(Error::Shape("dropout mask length mismatch".into()));
        }
        Tensor::from_vec(x.shape(), x.data().iter().zip(&self.0).map(|(a, m)| a * m).collect())
    }
}

/// Returns the output and, in train mode, the mask needed for backward.
pub fn dropout(x: &Tensor, rate: f32, mode: Mode, stream: &mut RngStream) -> Result<(Tensor, Option<DropoutMask>)> {
    check_rate(rate)?;
    match mode {
        Mode::Eval => Ok((x.clone(), None)),
        Mode::Train => {
            let mask = sample_mask(x.len(), rate, stream)?;
            Ok((mask.apply(x)?, Some(mask)))
        }
    }
}
