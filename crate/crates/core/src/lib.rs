//! Continual test-time adaptation with class prototypes.
//!
//! A small batch-normalized MLP is pretrained on a synthetic source task and
//! then adapted online over a stream of corrupted target domains. Adaptation
//! combines entropy minimization with two prototype losses: one pulling
//! features toward an exponential moving average of target prototypes, one
//! pulling them toward fixed source prototypes.

pub mod config;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod prototypes;
pub mod streams;

pub use config::ExperimentConfig;
pub use engine::{run_stream, AdaptConfig, AdaptationState, BatchOutcome, Method, StepRecord};
pub use error::{CtaError, Result};
pub use losses::{LabelMode, LossWeights};
pub use metrics::{RunReport, RunSummary};
pub use model::{ArchConfig, Mode, Model, ParamKind, PretrainConfig, TrainScope};
pub use numerics::Tensor;
pub use prototypes::{SourcePrototypes, TargetPrototypes};
pub use streams::{DomainOrder, DomainStream, SyntheticTask, TaskConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
