//! Adadelta with a global learning-rate multiplier.
//!
//! Per element, with decay `rho` and stabiliser `eps`:
//!
//! ```text
//! Eg2  <- rho * Eg2  + (1 - rho) * g^2
//! dx    = -sqrt(Edx2 + eps) / sqrt(Eg2 + eps) * g
//! Edx2 <- rho * Edx2 + (1 - rho) * dx^2
//! x    <- x + lr * dx
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adadelta {
    pub lr: f32,
    pub rho: f32,
    pub eps: f32,
}

impl Default for Adadelta {
    fn default() -> Self {
        Adadelta {
            lr: 1.0,
            rho: 0.95,
            eps: 1e-6,
        }
    }
}

/// Accumulators mirroring a model's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    pub eg2: Vec<Tensor>,
    pub edx2: Vec<Tensor>,
}

impl AdadeltaState {
    pub fn zeros_like(model: &ModelGraph) -> Result<AdadeltaState> {
        let eg2: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect::<Result<_>>()?;
        Ok(AdadeltaState { edx2: eg2.clone(), eg2 })
    }
}

impl Adadelta {
    /// Updates one parameter slice in place.
    pub fn update_slice(&self, param: &mut [f32], grad: &[f32], eg2: &mut [f32], edx2: &mut [f32]) -> Result<()> {
        let n = param.len();
        if grad.len() != n || eg2.len() != n || edx2.len() != n {
            return Err(Error::Param(format!(
                "adadelta length mismatch: param {n}, grad {}, state {}/{}",
                grad.len(),
                eg2.len(),
                edx2.len()
            )));
        }
        let (rho, eps, lr) = (self.rho as f64, self.eps as f64, self.lr as f64);
        for i in 0..n {
            let g = grad[i] as f64;
            if g == 0.0 {
                // Zero-gradient fixed point: neither the parameter nor the state move.
                continue;
            }
            let acc_g = rho * eg2[i] as f64 + (1.0 - rho) * g * g;
            let dx = -((edx2[i] as f64 + eps).sqrt() / (acc_g + eps).sqrt()) * g;
            let acc_dx = rho * edx2[i] as f64 + (1.0 - rho) * dx * dx;
            eg2[i] = acc_g as f32;
            edx2[i] = acc_dx as f32;
            param[i] = (param[i] as f64 + lr * dx) as f32;
        }
        Ok(())
    }

    /// Applies one step to every trainable parameter that has a gradient.
    /// Frozen parameters are never touched.
    pub fn step(&self, model: &mut ModelGraph, grads: &[Option<Tensor>], state: &mut AdadeltaState) -> Result<()> {
        if grads.len() != model.params().len() || state.eg2.len() != grads.len() || state.edx2.len() != grads.len() {
            return Err(Error::Param("adadelta: gradient/state list does not match parameters".into()));
        }
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = &grads[i] {
                if g.shape() != p.value.shape() {
                    return Err(Error::Param(format!("gradient shape mismatch for `{}`", p.name)));
                }
                self.update_slice(p.value.data_mut(), g.data(), state.eg2[i].data_mut(), state.edx2[i].data_mut())?;
            }
        }
        Ok(())
    }
}
