//! Forward/backward kernels for every layer type the network uses.

pub(crate) mod conv;
mod dropout;
mod pool;
mod relu;

pub use conv::{conv2d_backward, conv2d_forward, conv_output_size, ConvGrads};
pub use dropout::{dropout_backward, dropout_forward, DropoutMask};
pub use pool::{maxpool2d_backward, maxpool2d_forward, PoolIndices};
pub use relu::{relu_backward, relu_forward};

use crate::tensor::Tensor;

/// Weights, bias, and their momentum buffers for one learnable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub weight_velocity: Tensor,
    pub bias_velocity: Tensor,
}

impl LayerParams {
    /// Velocities start at zero.
    pub fn new(weights: Tensor, bias: Tensor) -> Self {
        LayerParams {
            weight_velocity: Tensor::zeros(weights.shape()),
            bias_velocity: Tensor::zeros(bias.shape()),
            weights,
            bias,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradient with respect to one layer's weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerGrads {
    pub fn zeros_like(params: &LayerParams) -> Self {
        LayerGrads {
            weights: Tensor::zeros(params.weights.shape()),
            bias: Tensor::zeros(params.bias.shape()),
        }
    }
}
