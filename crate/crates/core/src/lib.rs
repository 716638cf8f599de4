//! Temporal span localization with a set-prediction decoder and boundary
//! denoising.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod denoise;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod span;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Overrides, RunConfig};
pub use data::{DatasetConfig, Prediction, Sample, Window};
pub use denoise::NoiseConfig;
pub use error::{Error, Result};
pub use loss::ClassMode;
pub use matching::{hungarian_assign, LossWeights, MatchAssignment};
pub use metrics::{EvalConfig, EvalReport};
pub use model::{Model, ModelConfig};
pub use span::{clamp_and_order, giou_1d, iou_1d, l1_1d, Span};
