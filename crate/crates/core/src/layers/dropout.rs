use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which coordinates survived, and the inverted-dropout scale `1/(1−rate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub scale: f64,
}

impl DropoutMask {
    pub fn kept_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            return 1.0;
        }
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len() as f64
    }
}

/// Inverted dropout: survivors are scaled by `1/(1−rate)` so the inference
/// path needs no rescaling. Training only.
pub fn dropout_forward<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    rng: &mut R,
) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let scale = 1.0 / (1.0 - rate);
    let keep: Vec<bool> = if rate == 0.0 {
        vec![true; x.len()]
    } else {
        (0..x.len()).map(|_| rng.gen::<f64>() >= rate).collect()
    };
    let data = x
        .data()
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| if k { v * scale } else { 0.0 })
        .collect();
    Ok((Tensor::from_vec(x.shape(), data)?, DropoutMask { keep, scale }))
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Result<Tensor> {
    if mask.keep.len() != grad_out.len() {
        return Err(Error::shape(format!(
            "dropout mask covers {} values, gradient has {}",
            mask.keep.len(),
            grad_out.len()
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&mask.keep)
        .map(|(&g, &k)| if k { g * mask.scale } else { 0.0 })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}
