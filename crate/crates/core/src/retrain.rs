//! The `Train^t(W, m, g)` primitive and the retraining techniques built on it.
//!
//! Every technique is one call of the primitive with a particular choice of
//! start weights and schedule position:
//!
//! | technique                | start weights | schedule position |
//! |--------------------------|---------------|-------------------|
//! | fine-tuning              | `W_T`         | `T`               |
//! | weight rewinding         | `W_{T-t}`     | `T - t`           |
//! | learning-rate rewinding  | `W_T`         | `T - t`           |
//! | low-LR weight rewinding  | `W_{T-t}`     | `T`               |
//! | reinitialisation         | fresh `W'_0`  | `0`, for `T + t`  |
//!
//! Data order is keyed separately from the schedule: epoch `e` of the data
//! clock is shuffled with stream `e` of a ChaCha generator keyed by the run.
//! Weights carry their own data clock, so rewound weights replay the original
//! run's batches and weights resumed from `W_T` see fresh ones.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::{count_flops, search_cost, MetricsRecord, PruningMode};
use crate::model::{evaluate, forward_backward};
use crate::network::Network;
use crate::optim::{sgd_step, OptimizerConfig, OptimizerState};
use crate::pruner::{global_magnitude_prune, structured_filter_prune, PrunePool, StructuredRates};
use crate::schedule::Schedule;
use crate::snapshot::{RngState, Snapshot, SnapshotStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    FineTune,
    WeightRewind,
    LrRewind,
    LowLrWeightRewind,
    Reinit,
}

impl Technique {
    pub const ALL: [Technique; 5] = [
        Technique::FineTune,
        Technique::WeightRewind,
        Technique::LrRewind,
        Technique::LowLrWeightRewind,
        Technique::Reinit,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Technique::FineTune => "fine_tune",
            Technique::WeightRewind => "weight_rewind",
            Technique::LrRewind => "lr_rewind",
            Technique::LowLrWeightRewind => "low_lr_weight_rewind",
            Technique::Reinit => "reinit",
        }
    }

    /// Whether `t` is bounded by the original training time.
    pub fn requires_rewind_point(&self) -> bool {
        matches!(
            self,
            Technique::WeightRewind | Technique::LrRewind | Technique::LowLrWeightRewind
        )
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Technique::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown technique {s:?}")))
    }
}

/// A retraining technique together with its retraining time `t` in epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainTechnique {
    pub variant: Technique,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StartWeights {
    /// Restore the snapshot taken at this epoch of original training.
    Snapshot(f64),
    /// Sample new weights.
    Fresh,
}

/// Arguments of one `Train^t(W, m, g)` call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanPlan {
    pub start: StartWeights,
    /// Schedule position `g` of the first step.
    pub lr_start: f64,
    /// Data-clock epoch of the first step.
    pub data_start: f64,
    pub duration: f64,
}

impl RetrainTechnique {
    pub fn new(variant: Technique, t: f64) -> Self {
        Self { variant, t }
    }

    pub fn validate(&self, total_epochs: f64) -> Result<()> {
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(Error::Config(format!(
                "retraining time must be finite and >= 0, got {}",
                self.t
            )));
        }
        if self.variant.requires_rewind_point() && self.t > total_epochs {
            return Err(Error::RetrainTooLong {
                t: self.t,
                total: total_epochs,
            });
        }
        Ok(())
    }

    pub fn plan(&self, total_epochs: f64) -> Result<SpanPlan> {
        self.validate(total_epochs)?;
        let (t, big_t) = (self.t, total_epochs);
        Ok(match self.variant {
            Technique::FineTune => SpanPlan {
                start: StartWeights::Snapshot(big_t),
                lr_start: big_t,
                data_start: big_t,
                duration: t,
            },
            Technique::WeightRewind => SpanPlan {
                start: StartWeights::Snapshot(big_t - t),
                lr_start: big_t - t,
                data_start: big_t - t,
                duration: t,
            },
            Technique::LrRewind => SpanPlan {
                start: StartWeights::Snapshot(big_t),
                lr_start: big_t - t,
                data_start: big_t,
                duration: t,
            },
            Technique::LowLrWeightRewind => SpanPlan {
                start: StartWeights::Snapshot(big_t - t),
                lr_start: big_t,
                data_start: big_t - t,
                duration: t,
            },
            Technique::Reinit => SpanPlan {
                start: StartWeights::Fresh,
                lr_start: 0.0,
                data_start: 0.0,
                duration: big_t + t,
            },
        })
    }
}

/// Data-order key derived from a run seed.
pub fn run_key(seed: u64) -> RngState {
    ChaCha8Rng::seed_from_u64(seed).get_seed()
}

/// Weights plus momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub weights: Vec<f32>,
    pub velocity: Vec<f32>,
}

impl TrainState {
    pub fn from_network(net: &Network) -> Self {
        Self {
            weights: net.weights.clone(),
            velocity: vec![0.0; net.num_params()],
        }
    }

    fn apply_mask(&mut self, mask: &Mask) {
        mask.apply(&mut self.weights);
        mask.apply(&mut self.velocity);
    }
}

/// Everything needed to run masked SGD along a schedule.
#[derive(Debug, Clone, Copy)]
pub struct Trainer<'a> {
    /// Architecture; its weights are ignored.
    pub arch: &'a Network,
    pub schedule: &'a Schedule,
    pub optimizer: OptimizerConfig,
    pub data: &'a Dataset,
    pub rng_key: RngState,
}

impl<'a> Trainer<'a> {
    pub fn total_epochs(&self) -> f64 {
        self.schedule.total_epochs()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.optimizer.batch_size) as u64
    }

    pub fn epoch_to_step(&self, epoch: f64) -> u64 {
        (epoch * self.steps_per_epoch() as f64).round() as u64
    }

    /// Learning rate of the step at schedule position `step`.
    pub fn rate_at_step(&self, step: u64) -> Result<f32> {
        Ok(self
            .schedule
            .lr_at(step as f64 / self.steps_per_epoch() as f64)? as f32)
    }

    /// Example order for data-clock epoch `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::from_seed(self.rng_key);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs `n_steps` of masked Nesterov SGD. Step `k` uses the rate at
    /// schedule step `lr_step + k` and the batch at data step `data_step + k`.
    pub fn train_steps(
        &self,
        state: &mut TrainState,
        mask: &Mask,
        lr_step: u64,
        data_step: u64,
        n_steps: u64,
    ) -> Result<()> {
        mask.check_len(self.arch.num_params())?;
        state.apply_mask(mask);
        if n_steps == 0 {
            return Ok(());
        }
        let spe = self.steps_per_epoch();
        let bs = self.optimizer.batch_size;
        let mut net = self.arch.with_weights(std::mem::take(&mut state.weights))?;
        let mut opt = OptimizerState {
            velocity: std::mem::take(&mut state.velocity),
        };
        let mut cached: Option<(u64, Vec<usize>)> = None;
        let result = (|| {
            for k in 0..n_steps {
                let s = data_step + k;
                let (epoch, b) = (s / spe, (s % spe) as usize);
                if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    cached = Some((epoch, self.epoch_order(epoch)));
                }
                let order = &cached.as_ref().unwrap().1;
                let idx = &order[b * bs..((b + 1) * bs).min(order.len())];
                let batch = self.data.batch(idx)?;
                let (_, grad) = forward_backward(&net, mask, &batch)?;
                let lr = self.rate_at_step(lr_step + k)?;
                sgd_step(
                    &mut net.weights,
                    &mut opt,
                    mask,
                    &grad,
                    lr,
                    self.optimizer.momentum,
                    self.optimizer.weight_decay,
                )?;
            }
            Ok(())
        })();
        state.weights = net.weights;
        state.velocity = opt.velocity;
        result
    }

    /// `Train^t(W, m, g)`: `t` epochs from schedule position `lr_start`, with
    /// batches drawn from data-clock epoch `data_start` onwards.
    pub fn train_span(
        &self,
        state: &mut TrainState,
        mask: &Mask,
        lr_start: f64,
        data_start: f64,
        t: f64,
    ) -> Result<()> {
        if !(t >= 0.0 && lr_start >= 0.0 && data_start >= 0.0) {
            return Err(Error::Config(format!(
                "training span needs non-negative epochs (g = {lr_start}, t = {t})"
            )));
        }
        self.train_steps(
            state,
            mask,
            self.epoch_to_step(lr_start),
            self.epoch_to_step(data_start),
            self.epoch_to_step(t),
        )
    }

    /// Trains a fresh network for the full schedule, snapshotting at each of
    /// `retain` (plus 0 and `T`). Returns the final state.
    pub fn train_original(
        &self,
        init_seed: u64,
        store: &mut SnapshotStore,
        retain: &[f64],
    ) -> Result<TrainState> {
        let total = self.total_epochs();
        let mut epochs: Vec<f64> = retain.iter().copied().filter(|&e| e >= 0.0 && e <= total).collect();
        epochs.extend([0.0, total]);
        epochs.sort_by(f64::total_cmp);
        epochs.dedup();

        let init = Network::init(
            self.arch.input_shape().to_vec(),
            self.arch.layers().to_vec(),
            init_seed,
        )?;
        let mut state = TrainState::from_network(&init);
        let ones = Mask::ones(init.num_params());
        let mut step = 0u64;
        for epoch in epochs {
            let target = self.epoch_to_step(epoch);
            self.train_steps(&mut state, &ones, step, step, target - step)?;
            step = target;
            store.record(&Snapshot {
                epoch,
                weights: state.weights.clone(),
                velocity: state.velocity.clone(),
                rng_state: self.rng_key,
            })?;
            log::debug!("recorded snapshot at epoch {epoch} (step {step})");
        }
        Ok(state)
    }
}

/// What to prune to in a one-shot prune.
#[derive(Debug, Clone, PartialEq)]
pub enum PruneTarget {
    /// Global magnitude pruning to `d / surviving ≈ ratio`.
    Compression(f64),
    /// Global magnitude pruning to the given surviving fraction.
    Density(f64),
    Structured(StructuredRates),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedResult {
    /// 1-based pruning round.
    pub iteration: usize,
    pub mask: Mask,
    pub weights: Vec<f32>,
    pub metrics: MetricsRecord,
}

/// Runs retraining techniques against one trained run's snapshot store.
#[derive(Debug, Clone, Copy)]
pub struct Retrainer<'a> {
    pub trainer: Trainer<'a>,
    pub store: &'a SnapshotStore,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
    pub pool: PrunePool,
    /// Restore momentum and RNG key along with rewound weights.
    pub rewind_optimizer_state: bool,
    pub reinit_seed: u64,
    pub eval_batch: usize,
}

impl<'a> Retrainer<'a> {
    pub fn total_epochs(&self) -> f64 {
        self.trainer.total_epochs()
    }

    /// Start state and data-order key for a plan, before masking.
    pub fn start_state(&self, start: StartWeights) -> Result<(TrainState, RngState)> {
        match start {
            StartWeights::Snapshot(epoch) => {
                let snap = self.store.restore(epoch)?;
                if snap.weights.len() != self.trainer.arch.num_params() {
                    return Err(Error::LengthMismatch {
                        what: "snapshot weights",
                        expected: self.trainer.arch.num_params(),
                        actual: snap.weights.len(),
                    });
                }
                if self.rewind_optimizer_state {
                    Ok((
                        TrainState {
                            weights: snap.weights,
                            velocity: snap.velocity,
                        },
                        snap.rng_state,
                    ))
                } else {
                    let d = snap.weights.len();
                    Ok((
                        TrainState {
                            weights: snap.weights,
                            velocity: vec![0.0; d],
                        },
                        self.trainer.rng_key,
                    ))
                }
            }
            StartWeights::Fresh => {
                let arch = self.trainer.arch;
                let net = Network::init(
                    arch.input_shape().to_vec(),
                    arch.layers().to_vec(),
                    self.reinit_seed,
                )?;
                Ok((TrainState::from_network(&net), self.trainer.rng_key))
            }
        }
    }

    /// Retrains `mask` with one technique, starting from the technique's own
    /// start weights.
    pub fn retrain(&self, technique: RetrainTechnique, mask: &Mask) -> Result<TrainState> {
        self.retrain_from(technique, mask, None).map(|(state, _)| state)
    }

    /// Like [`Retrainer::retrain`], but techniques that start from the final
    /// weights may instead resume from `resume = (state, data_clock)`.
    /// Returns the trained state and its data clock.
    fn retrain_from(
        &self,
        technique: RetrainTechnique,
        mask: &Mask,
        resume: Option<(TrainState, f64)>,
    ) -> Result<(TrainState, f64)> {
        let plan = technique.plan(self.total_epochs())?;
        let resumes = matches!(technique.variant, Technique::FineTune | Technique::LrRewind);
        let (mut state, key, data_start) = match resume {
            Some((mut state, clock)) if resumes => {
                if !self.rewind_optimizer_state {
                    state.velocity.iter_mut().for_each(|v| *v = 0.0);
                }
                (state, self.trainer.rng_key, clock)
            }
            _ => {
                let (state, key) = self.start_state(plan.start)?;
                (state, key, plan.data_start)
            }
        };
        let trainer = Trainer {
            rng_key: key,
            ..self.trainer
        };
        trainer.train_span(&mut state, mask, plan.lr_start, data_start, plan.duration)?;
        Ok((state, data_start + plan.duration))
    }

    /// `Train^t(W_T, m, T)`.
    pub fn fine_tune(&self, mask: &Mask, t: f64) -> Result<TrainState> {
        self.retrain(RetrainTechnique::new(Technique::FineTune, t), mask)
    }

    /// `Train^t(W_{T-t}, m, T-t)`.
    pub fn weight_rewind(&self, mask: &Mask, t: f64) -> Result<TrainState> {
        self.retrain(RetrainTechnique::new(Technique::WeightRewind, t), mask)
    }

    /// `Train^t(W_T, m, T-t)`.
    pub fn lr_rewind(&self, mask: &Mask, t: f64) -> Result<TrainState> {
        self.retrain(RetrainTechnique::new(Technique::LrRewind, t), mask)
    }

    /// `Train^t(W_{T-t}, m, T)`.
    pub fn low_lr_weight_rewind(&self, mask: &Mask, t: f64) -> Result<TrainState> {
        self.retrain(RetrainTechnique::new(Technique::LowLrWeightRewind, t), mask)
    }

    /// `Train^{T+t}(W'_0, m, 0)` with `W'_0` drawn from `fresh_seed`.
    pub fn reinit_retrain(&self, mask: &Mask, t: f64, fresh_seed: u64) -> Result<TrainState> {
        let with_seed = Retrainer {
            reinit_seed: fresh_seed,
            ..*self
        };
        with_seed.retrain(RetrainTechnique::new(Technique::Reinit, t), mask)
    }

    /// Validation and test accuracy of `W ⊙ m`.
    pub fn evaluate(&self, weights: &[f32], mask: &Mask) -> Result<(f64, f64)> {
        let net = self.trainer.arch.with_weights(weights.to_vec())?;
        let val = evaluate(&net, mask, self.val.batches(self.eval_batch))?;
        let test = evaluate(&net, mask, self.test.batches(self.eval_batch))?;
        Ok((val, test))
    }

    fn record(
        &self,
        iteration: usize,
        mode: PruningMode,
        technique: RetrainTechnique,
        mask: Mask,
        state: TrainState,
    ) -> Result<PrunedResult> {
        let (val_accuracy, test_accuracy) = self.evaluate(&state.weights, &mask)?;
        let cost = search_cost(mode, technique, self.total_epochs());
        let metrics = MetricsRecord {
            test_accuracy,
            val_accuracy,
            compression_ratio: mask.compression_ratio()?,
            flops: count_flops(self.trainer.arch, &mask),
            retrain_epochs: cost.retrain_epochs,
            total_training_epochs: cost.total_training_epochs,
        };
        Ok(PrunedResult {
            iteration,
            mask,
            weights: state.weights,
            metrics,
        })
    }

    /// Mask for a one-shot prune of the final trained weights.
    pub fn one_shot_mask(&self, target: &PruneTarget) -> Result<Mask> {
        let final_weights = self.store.restore(self.total_epochs())?.weights;
        let trained = self.trainer.arch.with_weights(final_weights)?;
        let ones = Mask::ones(trained.num_params());
        let density = match *target {
            PruneTarget::Structured(ref rates) => return structured_filter_prune(&trained, rates),
            PruneTarget::Compression(c) => {
                if !(c > 1.0 && c.is_finite()) {
                    return Err(Error::Pruning(format!(
                        "target compression must be a finite value > 1, got {c}"
                    )));
                }
                1.0 / c
            }
            PruneTarget::Density(d) => d,
        };
        if !(density > 0.0 && density < 1.0) {
            return Err(Error::Pruning(format!(
                "target density must lie in (0, 1), got {density}"
            )));
        }
        global_magnitude_prune(&trained, &ones, 1.0 - density, self.pool)
    }

    /// Prunes `W_T` once to `target`, then retrains once.
    pub fn one_shot(&self, target: &PruneTarget, technique: RetrainTechnique) -> Result<PrunedResult> {
        technique.validate(self.total_epochs())?;
        let mask = self.one_shot_mask(target)?;
        let state = self.retrain(technique, &mask)?;
        self.record(1, PruningMode::OneShot, technique, mask, state)
    }

    /// Iterative pruning: `k` rounds of {prune `fraction` of the surviving
    /// weights globally, retrain}. Fine-tuning and learning-rate rewinding
    /// continue from the previous round's weights; rewinding techniques go
    /// back to the same `W_{T-t}` every round.
    pub fn iterative(
        &self,
        k: usize,
        technique: RetrainTechnique,
        fraction: f64,
    ) -> Result<Vec<PrunedResult>> {
        if k == 0 {
            return Err(Error::Config("iterative pruning needs at least one iteration".into()));
        }
        technique.validate(self.total_epochs())?;
        let total = self.total_epochs();
        let (mut current, _) = self.start_state(StartWeights::Snapshot(total))?;
        let mut clock = total;
        let mut mask = Mask::ones(self.trainer.arch.num_params());
        let mut results = Vec::with_capacity(k);
        for j in 1..=k {
            let trained = self.trainer.arch.with_weights(current.weights.clone())?;
            mask = global_magnitude_prune(&trained, &mask, fraction, self.pool)?;
            let (state, next_clock) = self.retrain_from(technique, &mask, Some((current, clock)))?;
            clock = next_clock;
            current = state.clone();
            let mode = PruningMode::Iterative { iterations: j };
            results.push(self.record(j, mode, technique, mask.clone(), state)?);
            log::info!(
                "{} t={} round {j}/{k}: compression {:.3}x, val {:.4}",
                technique.variant,
                technique.t,
                results[j - 1].metrics.compression_ratio,
                results[j - 1].metrics.val_accuracy
            );
        }
        Ok(results)
    }

    /// Prune 20% globally and retrain with learning-rate rewinding for the
    /// full original training time, `k` times.
    pub fn algorithm1(&self, k: usize) -> Result<Vec<PrunedResult>> {
        let t = self.total_epochs();
        self.iterative(
            k,
            RetrainTechnique::new(Technique::LrRewind, t),
            crate::pruner::DEFAULT_ITERATION_FRACTION,
        )
    }
}

/// Number of 20%-style rounds needed before `d / surviving >= target`,
/// following the floor arithmetic of global pruning over `pool_size`
/// candidates out of `d` parameters.
pub fn iterations_for_compression(d: usize, pool_size: usize, fraction: f64, target: f64) -> Result<usize> {
    let mut surviving_pool = pool_size;
    let fixed = d - pool_size;
    let mut k = 0;
    while (d as f64) / ((fixed + surviving_pool) as f64) < target {
        let pruned = crate::pruner::prune_count(surviving_pool, fraction);
        if pruned == 0 || surviving_pool == pruned {
            return Err(Error::Pruning(format!(
                "compression {target} unreachable: stuck at {} after {k} rounds",
                d as f64 / (fixed + surviving_pool) as f64
            )));
        }
        surviving_pool -= pruned;
        k += 1;
    }
    Ok(k)
}
