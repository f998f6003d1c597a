//! Learning universal input-space watermarks that widen the score gap
//! between in-distribution and out-of-distribution inputs of a fixed
//! classifier.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f32` tensors, seeded sampling, finite-difference oracle
//! * [`model`]: the fixed MLP classifier, its training and checkpoints
//! * [`data`]: IDX ingestion, normalization, synthetic sets, shifting augmentations
//! * [`scoring`]: softmax / free-energy / MaxLogit / ODIN / ReAct scorers
//! * [`watermark`]: watermark objectives, SAM-regularised signed descent
//! * [`metrics`]: FPR95, AUROC, AUPR and score histograms

mod codec;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod scoring;
pub mod search;
pub mod tensor;
pub mod watermark;

pub use data::{LabeledDataset, Normalizer, ShiftKind};
pub use error::{Error, Result};
pub use loss::LogitLoss;
pub use metrics::{DetectionMetrics, ScoreSample};
pub use model::{MlpModel, TrainConfig};
pub use scoring::{BaseScorer, Detector, ReAct, Scorer};
pub use tensor::{SeededRng, Tensor};
pub use watermark::{NegativeSource, Watermark, WatermarkConfig, WatermarkLoss};
