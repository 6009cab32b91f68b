//! Image ingestion, preprocessing, stain normalisation, augmentation and the
//! synthetic cell-image generator.

pub mod augment;
pub mod patch;
pub mod preprocess;
pub mod resample;
pub mod stain;
pub mod synth;

pub use augment::{
    augment_sample, expand_training_set, sample_params, variant_stream, AugmentParams, AugmentPolicy, AugmentedRow,
};
pub use patch::{patches_to_tensor, read_patch, write_png, ImagePatch};
pub use preprocess::{mean_normalize, min_max_rescale, standardize, StandardizeStats, ZcaWhitening};
pub use resample::{resample, TARGET_SIZE};
pub use stain::{stain_normalize, stain_normalize_unclipped, StainReference};
pub use synth::{generate_cells, SynthTask};
