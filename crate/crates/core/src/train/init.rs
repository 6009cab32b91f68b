use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, stream: &mut RngStream) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Param("glorot fans must be >= 1".into()));
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::uniform(shape, -a, a, stream)
}
