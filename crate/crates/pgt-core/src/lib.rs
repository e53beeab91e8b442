//! Progressive training of temporal convolutional networks.
//!
//! A long sequence is processed as consecutive steps of a fixed length.
//! Between steps each temporal layer carries a small boundary state forward;
//! gradients are truncated at the carry and accumulated across steps, so one
//! optimizer update sees the whole sequence while activation memory stays at
//! the size of a single step.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod fd;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::RunConfig;
pub use error::{PgtError, Result};
pub use eval::{InferenceMode, LogitAggregate};
pub use layers::{LayerState, MarkovVariant, PoolKind};
pub use model::{LayerKind, LayerSpec, MarkovState, Model, ModelSpec, ParamStore};
pub use schedule::{make_schedule, DprMode, ProgressiveSchedule};
pub use synthetic::{SyntheticTask, TaskRule};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Dtype, Scalar, Tensor};
pub use train::{Dataset, Sgd, StepLossMode, TrainConfig, TrainMode};
pub use verify::{CheckReport, VerifyOptions};
