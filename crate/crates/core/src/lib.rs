//! Sync-point drop (SPD) for tensor-parallel decoder inference, at desk scale.
//!
//! The crate simulates a toy decoder sharded over `D` devices, measures how
//! sensitive each block is to losing its attention-output all-reduce, and
//! applies the tiered treatment (zero-shot drop, block-to-block distillation,
//! attention-head grouping) under a block budget. A ring all-reduce cost
//! model turns the resulting plans into latency predictions.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod cost;
pub mod distill;
pub mod error;
pub mod grouping;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod sensitivity;
pub mod tensor;

pub use config::{Budget, PipelineConfig};
pub use error::{Result, SpdError};
pub use model::{Model, ModelConfig};
pub use parallel::{BlockMode, SyncPlan};
pub use pipeline::Strategy;
pub use sensitivity::{Category, SensitivityReport};
pub use tensor::{Elem, Tensor};
