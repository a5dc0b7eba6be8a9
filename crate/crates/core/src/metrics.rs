//! Accuracy, parameter-efficiency and search-cost bookkeeping, plus FLOPs
//! accounting for pruned networks.
//!
//! FLOPs convention: two per multiply-add, per example, forward pass only.
//! Bias additions, activations and pooling are free. A surviving dense weight
//! is used once per forward pass, a surviving conv kernel weight once per
//! output position (padding positions included).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::mask::Mask;
use crate::network::Network;
use crate::retrain::{RetrainTechnique, Technique};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub compression_ratio: f64,
    pub flops: u64,
    pub retrain_epochs: f64,
    pub total_training_epochs: f64,
}

/// Forward FLOPs per example of `W ⊙ m`.
pub fn count_flops(net: &Network, mask: &Mask) -> u64 {
    let mut total = 0u64;
    for r in net.param_ranges() {
        let uses = match net.layers()[r.layer] {
            LayerSpec::Dense { .. } => 1,
            LayerSpec::Conv2d { .. } => {
                let out = net.shape_before(r.layer + 1);
                (out[1] * out[2]) as u64
            }
            _ => unreachable!("parametric layer"),
        };
        let surviving = mask.bits()[r.kernel.clone()].iter().filter(|&&b| b).count() as u64;
        total += 2 * uses * surviving;
    }
    total
}

/// Dense FLOPs over pruned FLOPs.
pub fn speedup_over_original(dense_flops: u64, pruned_flops: u64) -> Result<f64> {
    if pruned_flops == 0 {
        return Err(Error::ZeroDenominator("pruned network has zero FLOPs"));
    }
    Ok(dense_flops as f64 / pruned_flops as f64)
}

/// FLOPs of a baseline technique over another technique's FLOPs, both taken
/// at the same compression ratio.
pub fn speedup_over_technique(base_flops: u64, other_flops: u64) -> Result<f64> {
    if other_flops == 0 {
        return Err(Error::ZeroDenominator("compared network has zero FLOPs"));
    }
    Ok(base_flops as f64 / other_flops as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PruningMode {
    OneShot,
    Iterative { iterations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchCost {
    pub retrain_epochs: f64,
    pub total_training_epochs: f64,
}

/// Additional retraining epochs spent, and the total including the original
/// `T`-epoch training run. Reinitialisation retrains for `T + t` epochs per
/// pruning round.
pub fn search_cost(mode: PruningMode, technique: RetrainTechnique, total_epochs: f64) -> SearchCost {
    let per_round = match technique.variant {
        Technique::Reinit => total_epochs + technique.t,
        _ => technique.t,
    };
    let rounds = match mode {
        PruningMode::OneShot => 1,
        PruningMode::Iterative { iterations } => iterations,
    };
    let retrain_epochs = rounds as f64 * per_round;
    SearchCost {
        retrain_epochs,
        total_training_epochs: total_epochs + retrain_epochs,
    }
}
