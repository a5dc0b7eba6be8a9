//! Train, prune and retrain small feed-forward networks, comparing
//! fine-tuning against weight rewinding and learning-rate rewinding.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`layer`], [`network`], [`mask`], [`model`], [`optim`]: a
//!   small deterministic training engine (`f32`, fixed reduction order).
//! - [`schedule`]: piecewise learning-rate schedules and their rewound suffixes.
//! - [`pruner`]: global magnitude pruning and structured L1 filter pruning.
//! - [`snapshot`]: checksummed on-disk training snapshots for exact rewinding.
//! - [`retrain`]: the `Train^t(W, m, g)` primitive, the retraining techniques,
//!   and one-shot / iterative pruning drivers.
//! - [`metrics`]: compression, FLOPs and search-cost accounting.
//! - [`harness`]: datasets, experiment configs, sweeps and CSV reports.

mod codec;
pub mod data;
pub mod error;
pub mod harness;
pub mod layer;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod network;
pub mod optim;
pub mod pruner;
pub mod retrain;
pub mod schedule;
pub mod snapshot;
pub mod tensor;

pub use data::Dataset;
pub use error::{Error, Result};
pub use layer::LayerSpec;
pub use mask::Mask;
pub use model::Batch;
pub use network::Network;
pub use optim::{OptimizerConfig, OptimizerState};
pub use retrain::{RetrainTechnique, Retrainer, Technique, TrainState, Trainer};
pub use schedule::Schedule;
pub use snapshot::{Snapshot, SnapshotStore};
pub use tensor::Tensor;
