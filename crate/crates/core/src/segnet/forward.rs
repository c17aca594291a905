use rand::RngCore;

use super::{NetworkParams, NetworkSpec};
use crate::error::{Error, Result};
use crate::layers::conv::conv2d_backward_impl;
use crate::layers::{
    conv2d_forward, dropout_backward, dropout_forward, maxpool2d_backward, maxpool2d_forward,
    relu_backward, relu_forward, DropoutMask, LayerGrads, PoolIndices,
};
use crate::tensor::Tensor;

/// Per-class per-location scores, `(|C|+1)×h×w`, background plane first.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps(pub Tensor);

impl ScoreMaps {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn class_count(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        self.0.plane(k)
    }
}

pub enum Mode<'a> {
    Eval,
    /// Dropout active, masks drawn from the given generator.
    Train(&'a mut dyn RngCore),
}

enum Step {
    Conv { layer: usize, input: Tensor },
    Relu { output: Tensor },
    Pool(PoolIndices),
    Dropout(DropoutMask),
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace {
    steps: Vec<Step>,
}

impl ForwardTrace {
    /// ReLU on/off pattern and pooling winners. Two inputs with the same
    /// pattern lie in the same linear region of the network.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<usize>) {
        let mut active = Vec::new();
        let mut winners = Vec::new();
        for step in &self.steps {
            match step {
                Step::Relu { output } => active.extend(output.data().iter().map(|&v| v > 0.0)),
                Step::Pool(idx) => winners.extend_from_slice(&idx.argmax),
                _ => {}
            }
        }
        (active, winners)
    }

    /// Smallest |pre-activation| over all active ReLU units; a cheap proxy for
    /// how close the input sits to a kink.
    pub fn min_active_margin(&self) -> f64 {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Relu { output } => Some(output),
                _ => None,
            })
            .flat_map(|t| t.data().iter().copied().filter(|&v| v > 0.0))
            .fold(f64::INFINITY, f64::min)
    }
}

fn check_input(image: &Tensor, spec: &NetworkSpec, params: &NetworkParams) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != spec.input_channels() {
        return Err(Error::shape(format!(
            "image has {c} channels, network expects {}",
            spec.input_channels()
        )));
    }
    if params.layers.len() != spec.conv_layer_count() {
        return Err(Error::shape(format!(
            "{} parameter layers for {} conv layers",
            params.layers.len(),
            spec.conv_layer_count()
        )));
    }
    if spec.output_size(h).is_none() || spec.output_size(w).is_none() {
        let min = spec.receptive_field();
        return Err(Error::TooSmall(format!(
            "{h}x{w} image is below the network's minimum input of {min}x{min}"
        )));
    }
    Ok(())
}

/// Score maps for `image` (eval mode: no dropout).
pub fn forward(image: &Tensor, params: &NetworkParams, spec: &NetworkSpec, mode: Mode<'_>) -> Result<ScoreMaps> {
    forward_traced(image, params, spec, mode).map(|(maps, _)| maps)
}

pub fn forward_traced(
    image: &Tensor,
    params: &NetworkParams,
    spec: &NetworkSpec,
    mut mode: Mode<'_>,
) -> Result<(ScoreMaps, ForwardTrace)> {
    check_input(image, spec, params)?;
    let mut steps = Vec::new();
    let mut x = image.clone();
    let mut layer = 0;
    for stage in &spec.stem {
        let y = conv2d_forward(&x, &params.layers[layer], 1)?;
        steps.push(Step::Conv { layer, input: x });
        layer += 1;
        x = relu_forward(&y);
        steps.push(Step::Relu { output: x.clone() });
        if let Some(p) = stage.pool {
            let (y, idx) = maxpool2d_forward(&x, p, p)?;
            steps.push(Step::Pool(idx));
            x = y;
        }
    }
    let last = spec.head.len() - 1;
    for (j, _) in spec.head.iter().enumerate() {
        if let Mode::Train(rng) = &mut mode {
            if spec.dropout_rate > 0.0 {
                let (y, mask) = dropout_forward(&x, spec.dropout_rate, *rng)?;
                steps.push(Step::Dropout(mask));
                x = y;
            }
        }
        let y = conv2d_forward(&x, &params.layers[layer], 1)?;
        steps.push(Step::Conv { layer, input: x });
        layer += 1;
        x = if j == last {
            y
        } else {
            let y = relu_forward(&y);
            steps.push(Step::Relu { output: y.clone() });
            y
        };
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("network produced non-finite scores".into()));
    }
    Ok((ScoreMaps(x), ForwardTrace { steps }))
}

/// Gradients of every layer given the gradient with respect to the score maps.
pub fn backward(trace: &ForwardTrace, params: &NetworkParams, grad_scores: &Tensor) -> Result<Vec<LayerGrads>> {
    let mut grads: Vec<Option<LayerGrads>> = vec![None; params.layers.len()];
    let mut g = grad_scores.clone();
    for step in trace.steps.iter().rev() {
        g = match step {
            Step::Conv { layer, input } => {
                let (gi, lg) = conv2d_backward_impl(input, &params.layers[*layer], &g, 1, *layer > 0)?
                    .into_layer_grads();
                grads[*layer] = Some(lg);
                gi
            }
            Step::Relu { output } => relu_backward(output, &g)?,
            Step::Pool(idx) => maxpool2d_backward(idx, &g)?,
            Step::Dropout(mask) => dropout_backward(mask, &g)?,
        };
    }
    grads
        .into_iter()
        .map(|g| g.ok_or_else(|| Error::shape("trace does not cover every layer")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::segnet::{build_network, ConvSpec, StemStage};

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            foreground_classes: 2,
            stem: vec![StemStage {
                conv: ConvSpec::new(3, 4, 3),
                pool: Some(2),
            }],
            head: vec![ConvSpec::new(4, 4, 3), ConvSpec::new(4, 3, 1)],
            dropout_rate: 0.5,
            seed: 3,
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = stream(seed, Stream::Test, 0);
        Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_scores() {
        let spec = small_spec();
        let mut params = build_network(&spec).unwrap();
        for l in &mut params.layers {
            l.weights.data_mut().fill(0.0);
        }
        let maps = forward(&image(12, 12, 1), &params, &spec, Mode::Eval).unwrap();
        assert!(maps.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(maps.class_count(), 3);
        assert_eq!((maps.height(), maps.width()), (3, 3));
    }

    #[test]
    fn eval_is_deterministic() {
        let spec = small_spec();
        let params = build_network(&spec).unwrap();
        let x = image(14, 11, 2);
        let a = forward(&x, &params, &spec, Mode::Eval).unwrap();
        let b = forward(&x, &params, &spec, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn undersized_image_reports_minimum() {
        let spec = small_spec();
        let params = build_network(&spec).unwrap();
        let err = forward(&image(5, 9, 0), &params, &spec, Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::TooSmall(_)));
        assert!(err.to_string().contains(&format!("{0}x{0}", spec.receptive_field())));
    }

    #[test]
    fn train_mode_mean_matches_eval() {
        let spec = small_spec();
        let mut params = build_network(&spec).unwrap();
        // Positive biases keep units alive so the comparison is not dominated
        // by exact zeros.
        for l in &mut params.layers {
            l.bias.data_mut().fill(0.3);
        }
        let x = image(12, 12, 4);
        let eval = forward(&x, &params, &spec, Mode::Eval).unwrap();
        let n = 200;
        let mut mean = Tensor::zeros(eval.tensor().shape());
        for i in 0..n {
            let mut rng = stream(9, Stream::Dropout, i);
            let m = forward(&x, &params, &spec, Mode::Train(&mut rng)).unwrap();
            mean.add_assign(m.tensor()).unwrap();
        }
        mean.scale(1.0 / n as f64);
        let num: f64 = mean.data().iter().zip(eval.tensor().data()).map(|(a, b)| (a - b).abs()).sum();
        let den: f64 = eval.tensor().data().iter().map(|v| v.abs()).sum();
        assert!(num / den < 0.05, "relative deviation {}", num / den);
    }
}
