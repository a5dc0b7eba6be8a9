use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Nesterov SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 128,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum buffer, laid out like the weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f32>,
}

impl OptimizerState {
    pub fn zeros(d: usize) -> Self {
        Self {
            velocity: vec![0.0; d],
        }
    }
}

/// One Nesterov SGD step with L2 weight decay folded into the gradient:
///
/// ```text
/// g' = g + wd * w
/// v  = momentum * v + g'
/// w  = w - lr * (g' + momentum * v)
/// ```
///
/// Only unpruned positions are updated; pruned positions of both `weights`
/// and the velocity are left at exactly zero.
pub fn sgd_step(
    weights: &mut [f32],
    state: &mut OptimizerState,
    mask: &Mask,
    grad: &[f32],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    let d = weights.len();
    mask.check_len(d)?;
    for (what, len) in [("gradient", grad.len()), ("velocity", state.velocity.len())] {
        if len != d {
            return Err(Error::LengthMismatch {
                what,
                expected: d,
                actual: len,
            });
        }
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
    }
    if let Some(index) = grad
        .iter()
        .zip(mask.bits())
        .position(|(g, &keep)| keep && !g.is_finite())
    {
        return Err(Error::NonFinite {
            what: "gradient",
            index,
            value: grad[index],
        });
    }
    for (j, &keep) in mask.bits().iter().enumerate() {
        if !keep {
            weights[j] = 0.0;
            state.velocity[j] = 0.0;
            continue;
        }
        let g = grad[j] + weight_decay * weights[j];
        let v = momentum * state.velocity[j] + g;
        state.velocity[j] = v;
        weights[j] -= lr * (g + momentum * v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_arithmetic() {
        let mut w = vec![1.0f32];
        let mut st = OptimizerState::zeros(1);
        sgd_step(&mut w, &mut st, &Mask::ones(1), &[0.5], 0.1, 0.0, 0.0).unwrap();
        assert!((w[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_updates_only_velocity() {
        let mut w = vec![0.3f32, -0.2];
        let mut st = OptimizerState::zeros(2);
        sgd_step(&mut w, &mut st, &Mask::ones(2), &[1.0, 2.0], 0.0, 0.9, 0.0).unwrap();
        assert_eq!(w, vec![0.3, -0.2]);
        assert_eq!(st.velocity, vec![1.0, 2.0]);
    }

    #[test]
    fn two_step_nesterov_recurrence() {
        // hand-unrolled recurrence, fixed gradient g
        let (g, lr, mu) = (0.5f32, 0.1f32, 0.9f32);
        let v1 = g;
        let w1 = 1.0f32 - lr * (g + mu * v1);
        let v2 = mu * v1 + g;
        let w2 = w1 - lr * (g + mu * v2);

        let mut w = vec![1.0f32];
        let mut st = OptimizerState::zeros(1);
        for _ in 0..2 {
            sgd_step(&mut w, &mut st, &Mask::ones(1), &[g], lr, mu, 0.0).unwrap();
        }
        assert!((w[0] - w2).abs() < 1e-7);
        assert!((st.velocity[0] - v2).abs() < 1e-7);
        // 1 - 0.1*(0.5+0.45) = 0.905; 0.905 - 0.1*(0.5+0.855) = 0.7695
        assert!((w[0] - 0.7695).abs() < 1e-6);
    }

    #[test]
    fn pruned_positions_stay_zero() {
        let mut w = vec![0.7f32, 0.4];
        let mut st = OptimizerState { velocity: vec![0.3, 0.3] };
        let mask = Mask::from_bits(vec![false, true]);
        sgd_step(&mut w, &mut st, &mask, &[1.0, 1.0], 0.1, 0.9, 0.01).unwrap();
        assert_eq!(w[0], 0.0);
        assert_eq!(st.velocity[0], 0.0);
        assert!(w[1] != 0.4);
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        let mut w = vec![2.0f32];
        let mut st = OptimizerState::zeros(1);
        sgd_step(&mut w, &mut st, &Mask::ones(1), &[0.0], 0.5, 0.0, 0.1).unwrap();
        assert!((w[0] - 1.9).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut w = vec![1.0f32, 1.0];
        let mut st = OptimizerState::zeros(2);
        let err = sgd_step(&mut w, &mut st, &Mask::ones(2), &[0.0, f32::INFINITY], 0.1, 0.9, 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        assert_eq!(w, vec![1.0, 1.0]);
    }
}
