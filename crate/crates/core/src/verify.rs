//! Finite-difference suites for every differentiable piece of the model:
//! layers, aggregators, the loss, and the whole network.

use rand::seq::index::sample;
use rand::Rng;

use crate::aggregation::{aggregate_backward, aggregate_forward, first_argmax, Aggregator};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check_masked, GradCheckReport};
use crate::layers::{
    conv2d_backward, conv2d_forward, dropout_backward, dropout_forward, maxpool2d_backward, maxpool2d_forward,
    relu_backward, relu_forward, LayerParams,
};
use crate::rng::{stream, Stream, StreamRng};
use crate::segnet::{
    flatten_grads, forward_traced, nll_loss, nll_loss_grad, sample_gradient, ConvSpec, LabeledImage, Mode,
    NetworkParams, NetworkSpec, StemStage,
};
use crate::aggregation::ClassScores;
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Points this close to a ReLU kink are not differentiated through.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.report.checked > 0 && self.report.max_relative_error < tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub instances: usize,
    /// Coordinates checked per instance (sampled without replacement).
    pub coords_per_instance: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { seed: 0, instances: 100, coords_per_instance: 24 }
    }
}

fn uniform(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape product")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn coords(rng: &mut StreamRng, len: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, len, k.min(len)).into_vec();
    v.sort_unstable();
    v
}

fn suite<F>(name: &str, opts: &SuiteOptions, index: u64, mut instance: F) -> Result<SuiteResult>
where
    F: FnMut(&mut StreamRng) -> Result<GradCheckReport>,
{
    let mut report = GradCheckReport::default();
    for i in 0..opts.instances {
        let mut rng = stream(opts.seed, Stream::Test, (index << 32) | i as u64);
        report.merge(&instance(&mut rng)?);
    }
    Ok(SuiteResult { name: name.to_string(), instances: opts.instances, report })
}

pub fn conv_suite(opts: &SuiteOptions) -> Result<SuiteResult> {
    suite("conv2d", opts, 1, |rng| {
        let c = rng.gen_range(1..4);
        let o = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let h = rng.gen_range(k..k + 5);
        let w = rng.gen_range(k..k + 5);
        let input = uniform(rng, &[c, h, w], 1.0);
        let params = LayerParams::new(uniform(rng, &[o, c, k, k], 1.0), uniform(rng, &[o], 1.0));
        let out = conv2d_forward(&input, &params, stride)?;
        let r = uniform(rng, out.shape(), 1.0);
        let g = conv2d_backward(&input, &params, &r, stride)?;
        let (ni, nw) = (input.len(), params.weights.len());
        let mut x: Vec<f64> = input.data().to_vec();
        x.extend_from_slice(params.weights.data());
        x.extend_from_slice(params.bias.data());
        let mut analytic = g.input.data().to_vec();
        analytic.extend_from_slice(g.weights.data());
        analytic.extend_from_slice(g.bias.data());
        let picked = coords(rng, x.len(), opts.coords_per_instance);
        let loss = |v: &[f64]| {
            let inp = Tensor::from_vec(input.shape(), v[..ni].to_vec()).ok()?;
            let p = LayerParams::new(
                Tensor::from_vec(params.weights.shape(), v[ni..ni + nw].to_vec()).ok()?,
                Tensor::from_vec(params.bias.shape(), v[ni + nw..].to_vec()).ok()?,
            );
            Some(dot(conv2d_forward(&inp, &p, stride).ok()?.data(), r.data()))
        };
        Ok(finite_diff_check_masked(loss, &x, &analytic, EPSILON, picked))
    })
}

pub fn relu_suite(opts: &SuiteOptions) -> Result<SuiteResult> {
    suite("relu", opts, 2, |rng| {
        let x = uniform(rng, &[2, 4, 5], 1.0);
        let r = uniform(rng, x.shape(), 1.0);
        let g = relu_backward(&x, &r)?;
        let picked: Vec<usize> = coords(rng, x.len(), opts.coords_per_instance)
            .into_iter()
            .filter(|&i| x.data()[i].abs() >= KINK_MARGIN)
            .collect();
        let loss = |v: &[f64]| Some(dot(relu_forward(&Tensor::from_vec(x.shape(), v.to_vec()).ok()?).data(), r.data()));
        Ok(finite_diff_check_masked(loss, x.data(), g.data(), EPSILON, picked))
    })
}

pub fn maxpool_suite(opts: &SuiteOptions) -> Result<SuiteResult> {
    suite("maxpool2d", opts, 3, |rng| {
        let k = rng.gen_range(2..4);
        let x = uniform(rng, &[2, k * 3 + 1, k * 2 + 1], 1.0);
        let (out, idx) = maxpool2d_forward(&x, k, k)?;
        let r = uniform(rng, out.shape(), 1.0);
        let g = maxpool2d_backward(&idx, &r)?;
        let picked = coords(rng, x.len(), opts.coords_per_instance);
        let loss = |v: &[f64]| {
            let (o, i) = maxpool2d_forward(&Tensor::from_vec(x.shape(), v.to_vec()).ok()?, k, k).ok()?;
            // A changed winner means the perturbation crossed a tie.
            (i.argmax == idx.argmax).then(|| dot(o.data(), r.data()))
        };
        Ok(finite_diff_check_masked(loss, x.data(), g.data(), EPSILON, picked))
    })
}

pub fn dropout_suite(opts: &SuiteOptions) -> Result<SuiteResult> {
    suite("dropout", opts, 4, |rng| {
        let x = uniform(rng, &[3, 4, 4], 1.0);
        let rate = rng.gen_range(0.0..0.9);
        let mask_seed: u64 = rng.gen();
        let (out, mask) = dropout_forward(&x, rate, &mut stream(mask_seed, Stream::Dropout, 0))?;
        let r = uniform(rng, out.shape(), 1.0);
        let g = dropout_backward(&mask, &r)?;
        let picked = coords(rng, x.len(), opts.coords_per_instance);
        let loss = |v: &[f64]| {
            let t = Tensor::from_vec(x.shape(), v.to_vec()).ok()?;
            let (o, _) = dropout_forward(&t, rate, &mut stream(mask_seed, Stream::Dropout, 0)).ok()?;
            Some(dot(o.data(), r.data()))
        };
        Ok(finite_diff_check_masked(loss, x.data(), g.data(), EPSILON, picked))
    })
}

pub fn aggregation_suite(kind: Aggregator, opts: &SuiteOptions) -> Result<SuiteResult> {
    let index = match kind {
        Aggregator::Sum => 5,
        Aggregator::Max => 6,
        Aggregator::Lse { .. } => 7,
    };
    suite(&format!("aggregate-{}", kind.name()), opts, index, |rng| {
        let n = rng.gen_range(1..40);
        let plane: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let upstream = rng.gen_range(-2.0..2.0);
        let g = aggregate_backward(&plane, kind, upstream)?;
        let winner = first_argmax(&plane);
        let picked = coords(rng, n, opts.coords_per_instance);
        let loss = |v: &[f64]| {
            if matches!(kind, Aggregator::Max) && first_argmax(v) != winner {
                return None;
            }
            Some(upstream * aggregate_forward(v, kind).ok()?)
        };
        Ok(finite_diff_check_masked(loss, &plane, &g, EPSILON, picked))
    })
}

pub fn loss_suite(opts: &SuiteOptions) -> Result<SuiteResult> {
    suite("nll-loss", opts, 8, |rng| {
        let k = rng.gen_range(2..22);
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let label = rng.gen_range(0..k);
        let g = nll_loss_grad(&ClassScores(scores.clone()), label)?;
        let loss = |v: &[f64]| nll_loss(&ClassScores(v.to_vec()), label).ok();
        Ok(finite_diff_check_masked(loss, &scores, &g, EPSILON, 0..k))
    })
}

/// Small network with every layer type: two pooled stem stages and a
/// three-layer head with dropout.
pub fn tiny_spec(seed: u64) -> NetworkSpec {
    NetworkSpec {
        foreground_classes: 3,
        stem: vec![
            StemStage { conv: ConvSpec::new(3, 4, 3), pool: Some(2) },
            StemStage { conv: ConvSpec::new(4, 5, 2), pool: Some(2) },
        ],
        head: vec![ConvSpec::new(5, 6, 2), ConvSpec::new(6, 5, 1), ConvSpec::new(5, 4, 1)],
        dropout_rate: 0.5,
        seed,
    }
}

pub fn end_to_end_suite(kind: Aggregator, opts: &SuiteOptions) -> Result<SuiteResult> {
    let index = 9 + match kind {
        Aggregator::Sum => 0,
        Aggregator::Max => 1,
        Aggregator::Lse { .. } => 2,
    };
    suite(&format!("network-{}", kind.name()), opts, index, |rng| {
        let spec = tiny_spec(rng.gen());
        let params = NetworkParams {
            layers: spec
                .conv_layers()
                .map(|c| {
                    let bound = (6.0 / c.fan_in() as f64).sqrt();
                    LayerParams::new(
                        uniform(rng, &[c.out_channels, c.in_channels, c.kernel, c.kernel], bound),
                        uniform(rng, &[c.out_channels], 0.1),
                    )
                })
                .collect(),
        };
        let side = rng.gen_range(spec.receptive_field()..spec.receptive_field() + 6);
        let image = uniform(rng, &[3, side, side], 1.0);
        let label = rng.gen_range(0..spec.class_count());
        let dropout_index: u64 = rng.gen_range(0..1 << 40);
        let sample = LabeledImage { image: &image, label };
        let (_, grads) = sample_gradient(sample, &params, &spec, kind, Some(dropout_index))?;
        let analytic = flatten_grads(&grads);
        let flat = params.flatten();

        let pattern = |p: &NetworkParams| -> Option<(Vec<bool>, Vec<usize>, usize)> {
            let mut drng = stream(spec.seed, Stream::Dropout, dropout_index);
            let (maps, trace) = forward_traced(&image, p, &spec, Mode::Train(&mut drng)).ok()?;
            let (active, winners) = trace.activation_pattern();
            let winner = if matches!(kind, Aggregator::Max) {
                (0..maps.class_count()).map(|c| first_argmax(maps.plane(c))).fold(0, |a, w| a * 1000 + w)
            } else {
                0
            };
            Some((active, winners, winner))
        };
        let base = pattern(&params);
        let picked = coords(rng, flat.len(), opts.coords_per_instance);
        let loss = |v: &[f64]| {
            let p = params.with_flat(v);
            if pattern(&p) != base {
                return None;
            }
            sample_gradient(sample, &p, &spec, kind, Some(dropout_index)).ok().map(|(l, _)| l)
        };
        Ok(finite_diff_check_masked(loss, &flat, &analytic, EPSILON, picked))
    })
}

/// Every suite, in a fixed order.
pub fn run_all(opts: &SuiteOptions) -> Result<Vec<SuiteResult>> {
    let aggregators = [Aggregator::Sum, Aggregator::Max, Aggregator::default()];
    let mut out = vec![conv_suite(opts)?, relu_suite(opts)?, maxpool_suite(opts)?, dropout_suite(opts)?];
    for kind in aggregators {
        out.push(aggregation_suite(kind, opts)?);
    }
    out.push(loss_suite(opts)?);
    for kind in aggregators {
        out.push(end_to_end_suite(kind, opts)?);
    }
    Ok(out)
}

/// Slack allowed on every aggregation invariant.
pub const INVARIANT_SLACK: f64 = 1e-9;

/// Counts of planes checked and the first violation found, if any.
#[derive(Clone, Debug, Default)]
pub struct InvariantReport {
    pub planes: usize,
    pub violations: Vec<String>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.planes > 0 && self.violations.is_empty()
    }
}

/// Checks on `planes` random score planes that LSE lies between the mean and
/// the max, grows with `r`, commutes with adding a constant, and has
/// gradient weights summing to one.
pub fn aggregation_invariants(seed: u64, planes: usize) -> Result<InvariantReport> {
    let mut report = InvariantReport { planes, violations: Vec::new() };
    for i in 0..planes {
        let mut rng = stream(seed, Stream::Test, (100 << 32) | i as u64);
        let len = rng.gen_range(1..=256);
        let spread = [0.01, 1.0, 10.0][rng.gen_range(0..3)];
        let plane: Vec<f64> = (0..len).map(|_| rng.gen_range(-spread..spread)).collect();
        let mut rs: Vec<f64> = (0..4).map(|_| 10f64.powf(rng.gen_range(-2.0..1.5))).collect();
        rs.sort_by(f64::total_cmp);
        let shift = rng.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = plane.iter().map(|v| v + shift).collect();

        let mean = aggregate_forward(&plane, Aggregator::Sum)? / len as f64;
        let max = aggregate_forward(&plane, Aggregator::Max)?;
        let mut fail = |what: String| report.violations.push(format!("plane {i}: {what}"));
        let mut previous = f64::NEG_INFINITY;
        for &r in &rs {
            let kind = Aggregator::lse(r)?;
            let v = aggregate_forward(&plane, kind)?;
            if v < mean - INVARIANT_SLACK || v > max + INVARIANT_SLACK {
                fail(format!("LSE r={r} gives {v} outside [{mean}, {max}]"));
            }
            if v < previous - INVARIANT_SLACK {
                fail(format!("LSE decreased to {v} at r={r}"));
            }
            previous = v;
            let moved = aggregate_forward(&shifted, kind)?;
            if (moved - (v + shift)).abs() > INVARIANT_SLACK {
                fail(format!("shift by {shift} moved LSE by {}", moved - v));
            }
            let total: f64 = aggregate_backward(&plane, kind, 1.0)?.iter().sum();
            if (total - 1.0).abs() > INVARIANT_SLACK {
                fail(format!("LSE r={r} gradient weights sum to {total}"));
            }
        }
    }
    Ok(report)
}
