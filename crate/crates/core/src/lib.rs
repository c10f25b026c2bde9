//! Query-based class-agnostic instance segmentation with learned objectness,
//! plus the matching, losses, data handling and recall evaluation around it.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod model;
pub mod rng;
pub mod trainer;

pub use candle_core::Device;
pub use error::{Error, Result};
pub use evaluation::{average_recall, ArReport, EvalConfig, EvalMode, Protocol};
pub use geometry::{box_iou, generalized_iou, mask_iou, BinaryMask, BoxCcwh, BoxXyxy, RleMask};
pub use losses::{LossWeights, ObjectnessVariant};
pub use matching::{hungarian_assign, MatchAssignment};
pub use model::{Model, ModelConfig, QueryInit};
pub use trainer::{evaluate_checkpoint, evaluate_model, predict_dataset, train, Preset, TrainConfig};
