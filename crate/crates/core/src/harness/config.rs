//! JSON experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::DatasetSpec;
use crate::layer::{conv4, mlp2, LayerSpec};
use crate::network::Network;
use crate::optim::OptimizerConfig;
use crate::pruner::{PrunePool, DEFAULT_ITERATION_FRACTION};
use crate::retrain::Technique;
use crate::schedule::{Schedule, ScheduleConfig};

pub const DEFAULT_RETRAIN_POINTS: usize = 10;
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ArchConfig {
    /// Flatten (if needed), dense `in -> hidden`, ReLU, dense `hidden -> classes`.
    Mlp2 { hidden: usize },
    Conv4 { channels: [usize; 2], hidden: usize },
    Custom { layers: Vec<LayerSpec> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruningModeConfig {
    #[default]
    OneShot,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    #[default]
    GlobalMagnitude,
    Structured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningConfig {
    #[serde(default)]
    pub mode: PruningModeConfig,
    #[serde(default)]
    pub heuristic: Heuristic,
    /// Fraction of surviving weights removed per iterative round.
    #[serde(default = "default_fraction")]
    pub per_iteration_fraction: f64,
    /// Layer index to per-layer density, for structured pruning.
    #[serde(default)]
    pub structured_rates: BTreeMap<usize, f64>,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            mode: PruningModeConfig::OneShot,
            heuristic: Heuristic::GlobalMagnitude,
            per_iteration_fraction: DEFAULT_ITERATION_FRACTION,
            structured_rates: BTreeMap::new(),
        }
    }
}

fn default_fraction() -> f64 {
    DEFAULT_ITERATION_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepConfig {
    /// Number of evenly spaced retraining times `round(i T / n)`, `i = 1..n`.
    #[serde(default)]
    pub retrain_points: Option<usize>,
    /// Explicit retraining times; overrides `retrain_points`.
    #[serde(default)]
    pub retrain_times: Option<Vec<f64>>,
    /// Targets for global magnitude pruning.
    #[serde(default)]
    pub compression_ratios: Vec<f64>,
    /// Exponents `k` applied to the structured rates.
    #[serde(default)]
    pub structured_exponents: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Label written to the `arch` CSV column; defaults to the preset name.
    #[serde(default)]
    pub name: Option<String>,
    pub arch: ArchConfig,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default = "all_techniques")]
    pub techniques: Vec<Technique>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub prune_biases: bool,
    #[serde(default = "yes")]
    pub prune_final_layer: bool,
    #[serde(default = "yes")]
    pub rewind_optimizer_state: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn all_techniques() -> Vec<Technique> {
    Technique::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn yes() -> bool {
    true
}

fn default_eval_batch() -> usize {
    256
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.optimizer.validate()?;
        let schedule = self.schedule()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.techniques.is_empty() {
            return Err(Error::Config("at least one technique is required".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be >= 1".into()));
        }
        let f = self.pruning.per_iteration_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!(
                "per_iteration_fraction must lie in (0, 1), got {f}"
            )));
        }
        match self.pruning.heuristic {
            Heuristic::GlobalMagnitude => {
                if self.sweep.compression_ratios.is_empty() {
                    return Err(Error::Config("sweep.compression_ratios is empty".into()));
                }
                if let Some(&c) = self.sweep.compression_ratios.iter().find(|&&c| !(c > 1.0 && c.is_finite())) {
                    return Err(Error::Config(format!("compression ratio must be > 1, got {c}")));
                }
            }
            Heuristic::Structured => {
                if self.pruning.mode == PruningModeConfig::Iterative {
                    return Err(Error::Config(
                        "structured pruning is one-shot only; use exponents to sweep compression".into(),
                    ));
                }
                if self.pruning.structured_rates.is_empty() {
                    return Err(Error::Config("structured pruning needs structured_rates".into()));
                }
                if self.sweep.structured_exponents.is_empty() {
                    return Err(Error::Config("sweep.structured_exponents is empty".into()));
                }
                if self.sweep.structured_exponents.contains(&0) {
                    return Err(Error::Config("structured exponents must be >= 1".into()));
                }
            }
        }
        if self.retrain_times(schedule.total_epochs())?.is_empty() {
            return Err(Error::Config("the retraining-time grid is empty".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::try_from(&self.schedule)
    }

    pub fn pool(&self) -> PrunePool {
        PrunePool {
            prune_biases: self.prune_biases,
            prune_final_layer: self.prune_final_layer,
        }
    }

    pub fn arch_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            match self.arch {
                ArchConfig::Mlp2 { .. } => "mlp2",
                ArchConfig::Conv4 { .. } => "conv4",
                ArchConfig::Custom { .. } => "custom",
            }
            .to_string()
        })
    }

    /// Retraining times: the explicit list if given, else the even grid.
    pub fn retrain_times(&self, total_epochs: f64) -> Result<Vec<f64>> {
        let mut times = match &self.sweep.retrain_times {
            Some(list) => list.clone(),
            None => crate::harness::sweep::sweep_grid(
                total_epochs,
                self.sweep.retrain_points.unwrap_or(DEFAULT_RETRAIN_POINTS),
            )?,
        };
        if let Some(&t) = times.iter().find(|&&t| !(t >= 0.0 && t.is_finite())) {
            return Err(Error::Config(format!("retraining time must be >= 0, got {t}")));
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        Ok(times)
    }

    /// Builds the layer stack for a given per-example input shape.
    pub fn layers(&self, input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
        Ok(match &self.arch {
            ArchConfig::Mlp2 { hidden } => {
                let flat: usize = input_shape.iter().product();
                let mut layers = Vec::new();
                if input_shape.len() > 1 {
                    layers.push(LayerSpec::Flatten);
                }
                layers.extend(mlp2(flat, *hidden, classes));
                layers
            }
            ArchConfig::Conv4 { channels, hidden } => {
                let [c, h, w] = *input_shape else {
                    return Err(Error::Config(format!(
                        "conv4 needs [c, h, w] inputs, dataset gives {input_shape:?}"
                    )));
                };
                conv4([c, h, w], (channels[0], channels[1]), *hidden, classes)
            }
            ArchConfig::Custom { layers } => layers.clone(),
        })
    }

    /// Architecture with zero weights, used as the shape template.
    pub fn architecture(&self, input_shape: &[usize], classes: usize) -> Result<Network> {
        Network::zeros(input_shape.to_vec(), self.layers(input_shape, classes)?)
    }

    /// Identifies a trained run: everything that influences original training.
    pub fn run_id(&self, seed: u64) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            arch: &'a ArchConfig,
            dataset: &'a DatasetSpec,
            schedule: &'a ScheduleConfig,
            optimizer: &'a OptimizerConfig,
            seed: u64,
        }
        let key = serde_json::to_vec(&Key {
            arch: &self.arch,
            dataset: &self.dataset,
            schedule: &self.schedule,
            optimizer: &self.optimizer,
            seed,
        })
        .expect("config serialises");
        let digest = Crc::<u64>::new(&CRC_64_XZ).checksum(&key);
        format!("{}-s{seed}-{digest:016x}", self.arch_name())
    }
}
