//! Multi-task soft-prompt composition on a frozen toy transformer.
//!
//! Each task's prompt is built from shared *source* prompts, weighted by a
//! learned per-task router, and a task-specific *private* prompt. Sources,
//! privates, their per-prompt encoders and the router are trained jointly
//! across tasks while the backbone stays frozen.
//!
//! The crate is `no_std` (it needs `alloc`); file formats and the command
//! line live in the companion `compt` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod compose;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod prompt;
pub mod rng;
pub mod router;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use backbone::{BackboneParams, ModelConfig, PromptPosition};
pub use compose::CompositionMethod;
pub use encoder::EncoderParams;
pub use error::{Error, Result, TensorError};
pub use model::{ComposedPrompt, PromptModel, WeightsMode};
pub use optim::{Optimizer, OptimizerKind};
pub use prompt::{PromptBank, SoftPrompt, SourceMask};
pub use router::{RouterState, TemperatureSchedule};
pub use tape::{Tape, Var};
pub use tasks::{Example, FamilySpec, GroupSpec, RuleBase, Split, TaskData, TaskSpec, World};
pub use tensor::Tensor;
pub use train::{evaluate, train, MetricsRecord, TrainConfig, Trainer};
