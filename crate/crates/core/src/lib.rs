//! Convolutional network training and evaluation engine for red-blood-cell
//! patch classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`rng`] and [`gradcheck`]: dense FP32 storage, seeded
//!   counter-based random streams and the finite-difference gradient oracle.
//! * [`layers`] and [`model`]: forward/backward for every layer kind and the
//!   two network builders (the 19-layer custom net and the VGG16-style
//!   baseline) with per-parameter freeze masks.
//! * [`train`]: Glorot init, binary cross-entropy, Adadelta, the epoch loop
//!   with best-validation checkpointing, checkpoint files and training curves.
//! * [`data`]: image ingestion, resampling, rescaling/standardisation, stain
//!   normalisation and the augmentation engine.
//! * [`svm`]: deep-feature extraction and an RBF-kernel SVM trained by SMO.
//! * [`eval`]: confusion matrix, metrics, ensembles, test-time augmentation,
//!   patient-level diagnosis and false-case export.
//! * [`harness`]: manifests, stratified splits, k-fold plans, experiment
//!   runners and comparison tables.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod model;
pub mod rng;
pub mod svm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{FreezeSpec, LayerSpec, Mode, ModelGraph};
pub use rng::RngStream;
pub use tensor::Tensor;

/// Binary class labels. Parasitized is the positive class (1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Uninfected,
    Parasitized,
}

impl Label {
    pub fn as_index(self) -> usize {
        match self {
            Label::Uninfected => 0,
            Label::Parasitized => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Uninfected
        } else {
            Label::Parasitized
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Parasitized
    }

    pub fn token(self) -> &'static str {
        match self {
            Label::Uninfected => "uninfected",
            Label::Parasitized => "parasitized",
        }
    }

    pub fn parse(token: &str) -> Option<Label> {
        match token.trim().to_ascii_lowercase().as_str() {
            "parasitized" => Some(Label::Parasitized),
            "uninfected" => Some(Label::Uninfected),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}
