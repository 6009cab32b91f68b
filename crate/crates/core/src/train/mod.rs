//! Loss, initialisation, Adadelta, the epoch loop and training artifacts.

pub mod adadelta;
pub mod checkpoint;
pub mod curves;
pub mod fit;
pub mod init;
pub mod loss;

pub use adadelta::{Adadelta, AdadeltaState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Blob, Checkpoint, CheckpointMeta};
pub use curves::{emit_training_curves, EpochRow, TrainingLog};
pub use fit::{evaluate, fit, train_epoch, EpochStats, EvalOutput, FitOutcome, SampleSource, TensorDataset, TrainConfig};
pub use loss::{bce, softmax_bce, PROB_CLAMP};
