//! Learning a localized concept from one masked source image.

pub mod augment;
pub mod checkpoint;
pub mod losses;
pub mod prompt;
pub mod train;

pub use augment::{augment, AugmentationConfig, SourceSample};
pub use checkpoint::{CheckpointManifest, ConceptCheckpoint, CHECKPOINT_VERSION};
pub use losses::{attention_loss, context_loss, roi_loss, total_loss};
pub use prompt::{build_prompt, ZoomTag};
pub use train::{concept_step, loss_trace_csv, train_concept, LossBreakdown, LossRecord, OptimizerKind, TrainOutcome, TrainingConfig};
