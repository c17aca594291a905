//! Image-level aggregation of per-location class scores: sum, max, and
//! log-sum-exp, each with its exact gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LSE_R: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Aggregator {
    Sum,
    Max,
    /// `(1/r)·log(mean(exp(r·s)))`; interpolates between the mean (r→0) and
    /// the max (r→∞).
    Lse { r: f64 },
}

impl Default for Aggregator {
    fn default() -> Self {
        Aggregator::Lse { r: DEFAULT_LSE_R }
    }
}

impl Aggregator {
    pub fn lse(r: f64) -> Result<Self> {
        let agg = Aggregator::Lse { r };
        agg.validate()?;
        Ok(agg)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Aggregator::Lse { r } if !(r > 0.0 && r.is_finite()) => Err(Error::invalid(format!(
                "LSE sharpness r must be positive, got {r}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::Sum => "sum",
            Aggregator::Max => "max",
            Aggregator::Lse { .. } => "lse",
        }
    }
}

/// One image-level score per class, background first.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores(pub Vec<f64>);

impl ClassScores {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        first_argmax(&self.0)
    }
}

/// Index of the first maximum.
pub(crate) fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn max_of(plane: &[f64]) -> f64 {
    plane.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn aggregate_forward(plane: &[f64], kind: Aggregator) -> Result<f64> {
    if plane.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty score plane"));
    }
    kind.validate()?;
    Ok(match kind {
        Aggregator::Sum => plane.iter().sum(),
        Aggregator::Max => max_of(plane),
        Aggregator::Lse { r } => {
            let m = max_of(plane);
            let mean = plane.iter().map(|&s| (r * (s - m)).exp()).sum::<f64>() / plane.len() as f64;
            m + mean.ln() / r
        }
    })
}

/// Gradient of [`aggregate_forward`] with respect to each plane entry, scaled
/// by `grad_out`. For LSE the weights are a softmax of `r·s` and sum to one.
pub fn aggregate_backward(plane: &[f64], kind: Aggregator, grad_out: f64) -> Result<Vec<f64>> {
    if plane.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty score plane"));
    }
    kind.validate()?;
    Ok(match kind {
        Aggregator::Sum => vec![grad_out; plane.len()],
        Aggregator::Max => {
            let mut g = vec![0.0; plane.len()];
            g[first_argmax(plane)] = grad_out;
            g
        }
        Aggregator::Lse { r } => {
            let m = max_of(plane);
            let mut w: Vec<f64> = plane.iter().map(|&s| (r * (s - m)).exp()).collect();
            let z: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v = grad_out * *v / z);
            w
        }
    })
}

/// Aggregate every plane of a `K×h×w` score tensor.
pub fn aggregate_maps(maps: &Tensor, kind: Aggregator) -> Result<ClassScores> {
    let (k, _, _) = maps.dims3()?;
    (0..k)
        .map(|c| aggregate_forward(maps.plane(c), kind))
        .collect::<Result<Vec<_>>>()
        .map(ClassScores)
}

pub fn aggregate_maps_backward(maps: &Tensor, kind: Aggregator, grad_scores: &[f64]) -> Result<Tensor> {
    let (k, h, w) = maps.dims3()?;
    if grad_scores.len() != k {
        return Err(Error::shape(format!(
            "{} upstream gradients for {k} planes",
            grad_scores.len()
        )));
    }
    let mut data = Vec::with_capacity(k * h * w);
    for (c, &g) in grad_scores.iter().enumerate() {
        data.extend(aggregate_backward(maps.plane(c), kind, g)?);
    }
    Tensor::from_vec(&[k, h, w], data)
}
