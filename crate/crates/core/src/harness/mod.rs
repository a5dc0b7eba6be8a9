//! Experiment harness: configuration, dataset loading, snapshot-store
//! management and the retraining sweep.

pub mod config;
pub mod dataset;
pub mod sweep;

use std::path::PathBuf;

use crate::error::Result;
use crate::network::Network;
use crate::pruner::StructuredRates;
use crate::retrain::{run_key, PruneTarget, Retrainer, Trainer};
use crate::schedule::Schedule;
use crate::snapshot::{retention_epochs, SnapshotStore};

pub use config::{ArchConfig, ExperimentConfig, Heuristic, PruningModeConfig};
pub use dataset::{load_dataset, DataSource, DatasetSpec, Splits};
pub use sweep::{
    pareto, read_rows, run_experiment, safe_zones, sweep_grid, write_outputs, CellFailure,
    ExperimentOutcome, ParetoRow, ResultRow, SafeZone,
};

/// Overrides the directory snapshot stores live under.
pub const SNAPSHOT_DIR_ENV: &str = "PRWD_SNAPSHOT_DIR";

/// Added to a run's seed to draw the weights used by reinitialisation.
pub const REINIT_SEED_OFFSET: u64 = 0x5EED_0000_0000;

/// Directory that holds one snapshot store per trained run.
pub fn snapshot_base(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(SNAPSHOT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.join("snapshots"))
}

/// Everything derived from a config that the runs share.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: ExperimentConfig,
    pub splits: Splits,
    pub schedule: Schedule,
    pub arch: Network,
    pub retrain_times: Vec<f64>,
    pub snapshot_base: PathBuf,
}

impl Session {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let splits = load_dataset(&config.dataset)?;
        let schedule = config.schedule()?;
        let arch = config.architecture(splits.train.example_shape(), splits.train.num_classes())?;
        let retrain_times = config.retrain_times(schedule.total_epochs())?;
        let snapshot_base = snapshot_base(&config);
        Ok(Self {
            config,
            splits,
            schedule,
            arch,
            retrain_times,
            snapshot_base,
        })
    }

    pub fn total_epochs(&self) -> f64 {
        self.schedule.total_epochs()
    }

    /// Snapshot epochs every configured technique may rewind to.
    pub fn retained_epochs(&self) -> Vec<f64> {
        retention_epochs(self.total_epochs(), &self.retrain_times)
    }

    pub fn trainer(&self, seed: u64) -> Trainer<'_> {
        Trainer {
            arch: &self.arch,
            schedule: &self.schedule,
            optimizer: self.config.optimizer,
            data: &self.splits.train,
            rng_key: run_key(seed),
        }
    }

    /// Opens the run's store, training from scratch unless every retained
    /// snapshot is already present.
    pub fn trained_store(&self, seed: u64) -> Result<SnapshotStore> {
        let run_id = self.config.run_id(seed);
        let mut store = SnapshotStore::open(&self.snapshot_base, &run_id)?;
        let needed = self.retained_epochs();
        if needed.iter().all(|&e| store.contains(e)) {
            log::info!("reusing snapshots of {run_id}");
            return Ok(store);
        }
        store.clear()?;
        log::info!("training {run_id} for {} epochs", self.total_epochs());
        self.trainer(seed).train_original(seed, &mut store, &needed)?;
        Ok(store)
    }

    pub fn retrainer<'a>(&'a self, store: &'a SnapshotStore, seed: u64) -> Retrainer<'a> {
        Retrainer {
            trainer: self.trainer(seed),
            store,
            val: &self.splits.validation,
            test: &self.splits.test,
            pool: self.config.pool(),
            rewind_optimizer_state: self.config.rewind_optimizer_state,
            reinit_seed: seed.wrapping_add(REINIT_SEED_OFFSET),
            eval_batch: self.config.eval_batch_size,
        }
    }

    /// One-shot targets of the configured sweep.
    pub fn targets(&self) -> Vec<PruneTarget> {
        match self.config.pruning.heuristic {
            Heuristic::GlobalMagnitude => self
                .config
                .sweep
                .compression_ratios
                .iter()
                .map(|&c| PruneTarget::Compression(c))
                .collect(),
            Heuristic::Structured => self
                .config
                .sweep
                .structured_exponents
                .iter()
                .map(|&k| {
                    PruneTarget::Structured(StructuredRates {
                        per_layer: self.config.pruning.structured_rates.clone(),
                        exponent: k,
                    })
                })
                .collect(),
        }
    }
}
