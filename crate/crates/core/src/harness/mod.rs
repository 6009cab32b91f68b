//! Manifests, splits, fold plans and experiment runners.

pub mod dataset;
pub mod experiment;
pub mod manifest;
pub mod runners;
pub mod split;

pub use dataset::{Augmentation, CellDataset, Normalization, PatchSource, Preprocessor};
pub use experiment::{
    build_model, run_single, train_model, transfer_frozen, AugmentMode, ExperimentConfig, HeadKind, LoadedModel,
    ModelPreset, RunResult, TrainedModel,
};
pub use manifest::{load_manifest, parse_manifest, Manifest, ManifestRow};
pub use runners::{
    ablation_table, freeze_sweep, metrics_table, normalization_grid, run_ablation, run_cv, run_holdout, stain_grid,
    summarize, summary_table, AblationCell, AblationRow, CvResult, HoldoutResult, Summary, Table,
};
pub use split::{kfold_plan, split_80_10_10, split_by_patient, CvMode, CvPlan, Fold, SplitPlan};
