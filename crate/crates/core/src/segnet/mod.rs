//! The segmentation network: a small trainable convolutional stem followed by
//! a head of valid convolutions that emits one score plane per class
//! (background is plane 0).

mod checkpoint;
mod forward;
mod objective;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{backward, forward, forward_traced, ForwardTrace, Mode, ScoreMaps};
pub use objective::{class_posteriors, nll_loss, nll_loss_grad, softmax};
pub use train::{sample_gradient, train_step, LabeledImage, TrainState};

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{conv_output_size, LayerGrads, LayerParams};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel side.
    pub kernel: usize,
    /// Frozen layers keep their initial values during training.
    pub frozen: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            frozen: false,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// A stem convolution (always followed by ReLU), optionally followed by a
/// non-overlapping max-pool of the given size.
#[derive(Clone, Debug, PartialEq)]
pub struct StemStage {
    pub conv: ConvSpec,
    pub pool: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Number of object classes, excluding background.
    pub foreground_classes: usize,
    pub stem: Vec<StemStage>,
    /// Head convolutions; all but the last are followed by ReLU, and dropout
    /// is applied to the input of each during training.
    pub head: Vec<ConvSpec>,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl NetworkSpec {
    /// Default layout: three stem convolutions with two 2×2 pools (d = 4) and
    /// a four-layer head whose last layer emits `foreground_classes + 1` planes.
    pub fn with_defaults(foreground_classes: usize, seed: u64) -> Self {
        let k = foreground_classes + 1;
        NetworkSpec {
            foreground_classes,
            stem: vec![
                StemStage {
                    conv: ConvSpec::new(3, 16, 3),
                    pool: Some(2),
                },
                StemStage {
                    conv: ConvSpec::new(16, 32, 3),
                    pool: Some(2),
                },
                StemStage {
                    conv: ConvSpec::new(32, 32, 3),
                    pool: None,
                },
            ],
            head: vec![
                ConvSpec::new(32, 32, 3),
                ConvSpec::new(32, 32, 3),
                ConvSpec::new(32, 32, 3),
                ConvSpec::new(32, k, 1),
            ],
            dropout_rate: 0.5,
            seed,
        }
    }

    /// Total number of score planes, background included.
    pub fn class_count(&self) -> usize {
        self.foreground_classes + 1
    }

    pub fn input_channels(&self) -> usize {
        self.conv_layers().next().map_or(3, |c| c.in_channels)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvSpec> {
        self.stem.iter().map(|s| &s.conv).chain(self.head.iter())
    }

    pub fn conv_layer_count(&self) -> usize {
        self.stem.len() + self.head.len()
    }

    /// Product of all pooling strides.
    pub fn downsample_factor(&self) -> usize {
        self.stem.iter().filter_map(|s| s.pool).product()
    }

    /// Side of the input patch that influences one output location.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for stage in &self.stem {
            rf += (stage.conv.kernel - 1) * jump;
            if let Some(p) = stage.pool {
                rf += (p - 1) * jump;
                jump *= p;
            }
        }
        for conv in &self.head {
            rf += (conv.kernel - 1) * jump;
        }
        rf
    }

    /// Output plane length for an input of length `len`, if nonempty.
    pub fn output_size(&self, len: usize) -> Option<usize> {
        let mut n = len;
        for stage in &self.stem {
            n = conv_output_size(n, stage.conv.kernel, 1)?;
            if let Some(p) = stage.pool {
                n = conv_output_size(n, p, p)?;
            }
        }
        for conv in &self.head {
            n = conv_output_size(n, conv.kernel, 1)?;
        }
        Some(n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.foreground_classes == 0 {
            return Err(Error::invalid("network needs at least one foreground class"));
        }
        if self.head.is_empty() {
            return Err(Error::invalid("network head is empty"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let mut channels = None;
        for (i, conv) in self.conv_layers().enumerate() {
            if conv.kernel == 0 || conv.in_channels == 0 || conv.out_channels == 0 {
                return Err(Error::invalid(format!("conv layer {i} has a zero dimension")));
            }
            if let Some(prev) = channels {
                if prev != conv.in_channels {
                    return Err(Error::shape(format!(
                        "conv layer {i} expects {} input channels but the previous layer emits {prev}",
                        conv.in_channels
                    )));
                }
            }
            channels = Some(conv.out_channels);
        }
        if let Some(p) = self.stem.iter().find_map(|s| s.pool.filter(|&p| p == 0)) {
            return Err(Error::invalid(format!("pool size {p} must be positive")));
        }
        if channels != Some(self.class_count()) {
            return Err(Error::shape(format!(
                "last head layer emits {:?} planes, expected {} (classes + background)",
                channels,
                self.class_count()
            )));
        }
        Ok(())
    }
}

/// One [`LayerParams`] per convolution, stem first.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
}

impl NetworkParams {
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerParams::parameter_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.is_finite())
    }

    /// All weights and biases flattened layer by layer (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Inverse of [`NetworkParams::flatten`]; velocities are reset.
    pub fn with_flat(&self, flat: &[f64]) -> NetworkParams {
        let mut offset = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let nw = l.weights.len();
                let nb = l.bias.len();
                let w = Tensor::from_vec(l.weights.shape(), flat[offset..offset + nw].to_vec())
                    .expect("flat length");
                let b = Tensor::from_vec(l.bias.shape(), flat[offset + nw..offset + nw + nb].to_vec())
                    .expect("flat length");
                offset += nw + nb;
                LayerParams::new(w, b)
            })
            .collect();
        NetworkParams { layers }
    }
}

/// Gradients in the order of [`NetworkParams::flatten`].
pub fn flatten_grads(grads: &[LayerGrads]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.weights.data().iter().chain(g.bias.data()).copied())
        .collect()
}

/// Weights ~ U(−1/√fan_in, 1/√fan_in), biases zero, drawn from the `Init`
/// stream of `spec.seed`.
pub fn build_network(spec: &NetworkSpec) -> Result<NetworkParams> {
    build_network_scaled(spec, 1.0)
}

/// Like [`build_network`] with the bound multiplied by `gain`; `gain = √6`
/// gives He-uniform initialization.
pub fn build_network_scaled(spec: &NetworkSpec, gain: f64) -> Result<NetworkParams> {
    spec.validate()?;
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::invalid(format!("init gain {gain} must be positive")));
    }
    let layers = spec
        .conv_layers()
        .enumerate()
        .map(|(i, conv)| {
            let mut rng = stream(spec.seed, Stream::Init, i as u64);
            let bound = gain / (conv.fan_in() as f64).sqrt();
            let shape = [conv.out_channels, conv.in_channels, conv.kernel, conv.kernel];
            let n: usize = shape.iter().product();
            let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            LayerParams::new(
                Tensor::from_vec(&shape, w).expect("shape product"),
                Tensor::zeros(&[conv.out_channels]),
            )
        })
        .collect();
    Ok(NetworkParams { layers })
}
