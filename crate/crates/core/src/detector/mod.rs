//! Compact detector with an optional FDAF neck, its losses and training.

pub mod assign;
pub mod bbox;
pub mod checkpoint;
pub mod decode;
pub mod loss;
pub mod model;
pub mod objective;
pub mod roi;
pub mod train;

pub use assign::{assign_targets, Assignment};
pub use bbox::BBox;
pub use decode::{decode, nms, BoxCoder, HeadLayout};
pub use loss::{detection_loss, DetLossTerms};
pub use model::{DetectorModel, ModelConfig, NeckKind, STRIDE};
pub use objective::{loss_with_pairs, match_predictions, total_loss, total_loss_and_grads, FreqPairs, LossBreakdown, LossConfig};
pub use roi::{roi_crop, RoiCropOp};
pub use train::{train, Sample, Sgd, StepRecord, TrainConfig};
