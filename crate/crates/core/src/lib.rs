//! Meta-learned update rules for continual learning.
//!
//! A small element-wise network predicts one update step per classifier
//! parameter from the current gradient, the previous task's average squared
//! gradient, the previous optimum and the current parameters. The predictor
//! is meta-trained on pairs of consecutive tasks so that the updates it
//! proposes keep the loss low on both the new and the previous task.
//!
//! Modules, bottom up:
//!
//! - [`ndcore`]: matrices, flat vectors, layouts, seeded RNG streams.
//! - [`classifier`]: ReLU/softmax network, cross-entropy gradients.
//! - [`predictor`]: feature assembly, step prediction, one-step meta-gradient.
//! - [`tasks`]: IDX loading and task generators.
//! - [`engine`]: optimizers, update-rule registry, meta-training and
//!   continual learning loops.
//! - [`experiment`]: config files, checkpoints, metrics and run orchestration.

pub mod classifier;
pub mod engine;
mod error;
pub mod experiment;
pub mod mlp;
pub mod ndcore;
pub mod predictor;
pub mod tasks;

pub use error::{Error, Result};
