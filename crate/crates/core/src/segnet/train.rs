#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::forward::{backward, forward_traced, Mode};
use super::objective::{nll_loss, nll_loss_grad};
use super::{NetworkParams, NetworkSpec};
use crate::aggregation::{aggregate_maps, aggregate_maps_backward, Aggregator};
use crate::error::{Error, Result};
use crate::layers::LayerGrads;
use crate::optim::{sgd_update, OptimizerConfig};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// The only thing training ever sees of a sample: a normalized image and its
/// image-level label.
#[derive(Clone, Copy, Debug)]
pub struct LabeledImage<'a> {
    pub image: &'a Tensor,
    pub label: usize,
}

/// Optimizer configuration plus the schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub optimizer: OptimizerConfig,
    pub examples_seen: u64,
    pub steps: u64,
}

impl TrainState {
    pub fn new(optimizer: OptimizerConfig) -> Self {
        TrainState {
            optimizer,
            examples_seen: 0,
            steps: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.optimizer.learning_rate_at(self.examples_seen)
    }
}

/// Loss and per-layer gradients for one labeled image. With `dropout_stream`
/// set, dropout masks come from that counter of the `Dropout` stream;
/// otherwise the network runs in eval mode.
pub fn sample_gradient(
    sample: LabeledImage<'_>,
    params: &NetworkParams,
    spec: &NetworkSpec,
    aggregator: Aggregator,
    dropout_stream: Option<u64>,
) -> Result<(f64, Vec<LayerGrads>)> {
    let mut rng;
    let mode = match dropout_stream {
        Some(idx) => {
            rng = stream(spec.seed, Stream::Dropout, idx);
            Mode::Train(&mut rng)
        }
        None => Mode::Eval,
    };
    let (maps, trace) = forward_traced(sample.image, params, spec, mode)?;
    let scores = aggregate_maps(maps.tensor(), aggregator)?;
    let loss = nll_loss(&scores, sample.label)?;
    let grad_scores = nll_loss_grad(&scores, sample.label)?;
    let grad_maps = aggregate_maps_backward(maps.tensor(), aggregator, &grad_scores)?;
    let grads = backward(&trace, params, &grad_maps)?;
    Ok((loss, grads))
}

/// One SGD update from the mean gradient of `batch`. Returns the mean loss
/// measured before the update. On a non-finite loss or gradient the
/// parameters are left untouched and an error is returned.
pub fn train_step(
    batch: &[LabeledImage<'_>],
    params: &mut NetworkParams,
    spec: &NetworkSpec,
    aggregator: Aggregator,
    state: &mut TrainState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let shape = batch[0].image.shape();
    if batch.iter().any(|s| s.image.shape() != shape) {
        return Err(Error::shape("batch images differ in size"));
    }
    if let Some(bad) = batch.iter().find(|s| s.label >= spec.class_count()) {
        return Err(Error::invalid(format!(
            "label {} out of range for {} classes",
            bad.label,
            spec.class_count()
        )));
    }
    let base = state.examples_seen;
    let per_sample = |(i, s): (usize, &LabeledImage<'_>)| {
        let idx = if spec.dropout_rate > 0.0 { Some(base + i as u64) } else { None };
        sample_gradient(*s, params, spec, aggregator, idx)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(f64, Vec<LayerGrads>)>> = batch.par_iter().enumerate().map(per_sample).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(f64, Vec<LayerGrads>)>> = batch.iter().enumerate().map(per_sample).collect();

    // Reduce in sample order so the sum does not depend on thread count.
    let mut total_loss = 0.0;
    let mut sum: Option<Vec<LayerGrads>> = None;
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.weights.add_assign(&g.weights)?;
                    a.bias.add_assign(&g.bias)?;
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mean_loss = total_loss / n;
    let mut grads = sum.expect("nonempty batch");
    for g in &mut grads {
        g.weights.scale(1.0 / n);
        g.bias.scale(1.0 / n);
    }
    if !mean_loss.is_finite() || grads.iter().any(|g| !g.weights.is_finite() || !g.bias.is_finite()) {
        return Err(Error::NonFinite(format!(
            "non-finite loss or gradient at step {} (loss {mean_loss})",
            state.steps
        )));
    }

    let lr = state.learning_rate();
    for ((p, g), conv) in params.layers.iter_mut().zip(&grads).zip(spec.conv_layers()) {
        if !conv.frozen {
            sgd_update(p, g, &state.optimizer, lr);
        }
    }
    state.examples_seen += batch.len() as u64;
    state.steps += 1;
    Ok(mean_loss)
}
