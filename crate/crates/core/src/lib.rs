//! Sparsity-targeted training: linearized Bregman optimizers whose
//! regularization weight is steered by a feedback controller toward a
//! requested sparsity, plus dense and magnitude-pruning baselines and the
//! desk-scale models used to exercise them.

pub mod controller;
pub mod error;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod param_store;
pub mod prox;
pub mod runner;

pub use controller::{ControllerConfig, ControllerState};
pub use error::{Error, Result};
pub use models::{Dataset, Labels, ModelSpec};
pub use optim::Variant;
pub use param_store::{Mask, ParamStore, ParamTensor, Penalty, Scope};
pub use runner::{DataSpec, LrDecay, OptimizerKind, RunConfig, RunLog, RunSummary, StepRow};
