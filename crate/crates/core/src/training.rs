//! The training loop: epoch shuffling, per-example jitter, optional random
//! crops, and minibatch SGD steps.

use rand::seq::SliceRandom;

use crate::aggregation::Aggregator;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::rng::{stream, Stream};
use crate::segnet::{train_step, LabeledImage, NetworkParams, NetworkSpec, TrainState};
use crate::synthgen::{jitter_image, normalize_image, training_crop, JitterSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub aggregator: Aggregator,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    /// `None` trains on unaugmented images.
    pub jitter: Option<JitterSpec>,
    /// Random square crop side; `None` uses whole images.
    pub crop: Option<usize>,
    /// Seeds shuffling, jitter and crops. Initialization and dropout use the
    /// network seed.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            aggregator: Aggregator::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            epochs: 10,
            max_steps: None,
            jitter: Some(JitterSpec::default()),
            crop: None,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.aggregator.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if let Some(j) = &self.jitter {
            j.validate()?;
        }
        if self.crop == Some(0) {
            return Err(Error::invalid("crop size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub examples_seen: u64,
    pub learning_rate: f64,
    pub mean_loss: f64,
}

/// The network input for training example number `example` (its position in
/// the whole run): jittered, cropped and normalized.
fn training_input(image: &Tensor, cfg: &TrainingConfig, example: u64) -> Result<Tensor> {
    let mut rng = stream(cfg.seed, Stream::Jitter, example);
    let mut x = match &cfg.jitter {
        Some(j) => jitter_image(image, &j.draw(&mut rng), &mut rng)?,
        None => image.clone(),
    };
    if let Some(c) = cfg.crop {
        x = training_crop(&x, c, &mut rng)?;
    }
    normalize_image(&x)
}

/// Trains `params` in place on images with values in `[0, 1]`. `on_step` sees
/// every step's record. On a non-finite step the parameters keep their last
/// good values and the error is returned.
pub fn train<F: FnMut(&LossRecord)>(
    data: &[LabeledImage<'_>],
    spec: &NetworkSpec,
    params: &mut NetworkParams,
    cfg: &TrainingConfig,
    mut on_step: F,
) -> Result<TrainState> {
    cfg.validate()?;
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut state = TrainState::new(cfg.optimizer.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, Stream::Shuffle, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| state.steps >= m) {
                break 'epochs;
            }
            let inputs = chunk
                .iter()
                .enumerate()
                .map(|(i, &idx)| training_input(data[idx].image, cfg, state.examples_seen + i as u64))
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<LabeledImage<'_>> = inputs
                .iter()
                .zip(chunk)
                .map(|(image, &idx)| LabeledImage { image, label: data[idx].label })
                .collect();
            let learning_rate = state.learning_rate();
            let step = state.steps;
            let mean_loss = train_step(&batch, params, spec, cfg.aggregator, &mut state)?;
            on_step(&LossRecord { step, examples_seen: state.examples_seen, learning_rate, mean_loss });
        }
    }
    Ok(state)
}
