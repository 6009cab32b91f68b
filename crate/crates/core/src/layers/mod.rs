//! Forward and backward passes for every layer kind.
//!
//! The kernels are generic over [`Scalar`] (f32 and f64) and work on flat
//! row-major slices; the [`Tensor`](crate::Tensor) wrappers used by the model
//! are thin f32 instantiations. The f64 instantiation exists for tight
//! finite-difference checks.

use std::fmt::Debug;

use ndarray::LinalgScalar;
use num_traits::Float;

pub mod activation;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod pool;

pub use activation::{relu, relu_backward, softmax2, softmax2_backward};
pub use conv::{conv2d, conv2d_backward, ConvGrads};
pub use dense::{dense, dense_backward, DenseGrads};
pub use dropout::{dropout, DropoutMask};
pub use pool::{maxpool2d, maxpool2d_backward, PoolIndices};

pub trait Scalar: LinalgScalar + Float + Send + Sync + Debug + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// The seven layer kinds the networks are built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Conv2d,
    MaxPool2d,
    Relu,
    Dense,
    Dropout,
    Flatten,
    Softmax,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Conv2d,
        LayerKind::MaxPool2d,
        LayerKind::Relu,
        LayerKind::Dense,
        LayerKind::Dropout,
        LayerKind::Flatten,
        LayerKind::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::Relu => "relu",
            LayerKind::Dense => "dense",
            LayerKind::Dropout => "dropout",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
        }
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
