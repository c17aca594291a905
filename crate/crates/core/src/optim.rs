//! SGD with momentum, weight decay, and a step learning-rate schedule.

use crate::error::{Error, Result};
use crate::layers::{LayerGrads, LayerParams};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied once per `decay_interval` examples seen.
    pub decay_factor: f64,
    pub decay_interval: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.00005,
            decay_factor: 0.8,
            decay_interval: 50_000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is allowed so a run can be frozen for inspection.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "decay factor {} outside (0, 1]",
                self.decay_factor
            )));
        }
        if self.decay_interval == 0 {
            return Err(Error::invalid("decay interval must be positive"));
        }
        Ok(())
    }

    /// `learning_rate × decay_factor^⌊examples_seen / decay_interval⌋`.
    pub fn learning_rate_at(&self, examples_seen: u64) -> f64 {
        let intervals = (examples_seen / self.decay_interval) as i32;
        self.learning_rate * self.decay_factor.powi(intervals)
    }
}

/// One momentum update of a single layer:
/// `v ← momentum·v − lr·(g + weight_decay·w)`, `w ← w + v`.
/// Biases get no weight decay.
pub fn sgd_update(params: &mut LayerParams, grads: &LayerGrads, cfg: &OptimizerConfig, lr: f64) {
    debug_assert!(params.weights.same_shape(&grads.weights));
    debug_assert!(params.bias.same_shape(&grads.bias));
    let w = params.weights.data_mut();
    let v = params.weight_velocity.data_mut();
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(grads.weights.data()) {
        *v = cfg.momentum * *v - lr * (g + cfg.weight_decay * *w);
        *w += *v;
    }
    let b = params.bias.data_mut();
    let v = params.bias_velocity.data_mut();
    for ((b, v), g) in b.iter_mut().zip(v.iter_mut()).zip(grads.bias.data()) {
        *v = cfg.momentum * *v - lr * g;
        *b += *v;
    }
}

/// Apply [`sgd_update`] to every layer. `grads` must mirror `params`.
pub fn sgd_step(
    params: &mut [LayerParams],
    grads: &[LayerGrads],
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameter layers but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if !p.weights.same_shape(&g.weights) || !p.bias.same_shape(&g.bias) {
            return Err(Error::shape(format!(
                "gradient shapes {:?}/{:?} do not mirror parameters {:?}/{:?}",
                g.weights.shape(),
                g.bias.shape(),
                p.weights.shape(),
                p.bias.shape()
            )));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        sgd_update(p, g, cfg, lr);
    }
    Ok(())
}
