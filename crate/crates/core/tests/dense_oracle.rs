use milseg::densepriors::{dense_scores, dense_scores_with, DenseMode};
use milseg::rng::{stream, Stream};
use milseg::segnet::{build_network, forward, ConvSpec, Mode, NetworkParams, NetworkSpec, StemStage};
use milseg::Tensor;
use rand::Rng;

fn spec_with_pools(pools: &[Option<usize>], seed: u64) -> NetworkSpec {
    let mut stem = Vec::new();
    let mut c = 3;
    for (i, &pool) in pools.iter().enumerate() {
        let out = 4 + i;
        stem.push(StemStage { conv: ConvSpec::new(c, out, 3), pool });
        c = out;
    }
    NetworkSpec {
        foreground_classes: 2,
        stem,
        head: vec![ConvSpec::new(c, 5, 3), ConvSpec::new(5, 3, 1)],
        dropout_rate: 0.5,
        seed,
    }
}

fn random_params(spec: &NetworkSpec) -> NetworkParams {
    let mut params = build_network(spec).unwrap();
    let mut rng = stream(spec.seed, Stream::Test, 0);
    for layer in &mut params.layers {
        for b in layer.bias.data_mut() {
            *b = rng.gen_range(-0.2..0.2);
        }
    }
    params
}

fn random_image(h: usize, w: usize, index: u64) -> Tensor {
    let mut rng = stream(99, Stream::Test, index);
    let data = (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[3, h, w], data).unwrap()
}

fn mirror(i: isize, n: usize) -> usize {
    let mut i = i;
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Score of the `R×R` patch centered on each pixel, one forward pass per pixel.
fn naive_dense(image: &Tensor, params: &NetworkParams, spec: &NetworkSpec) -> Tensor {
    let (_, h, w) = image.dims3().unwrap();
    let r = spec.receptive_field();
    let before = ((r - 1) / 2) as isize;
    let k = spec.class_count();
    let mut out = Tensor::zeros(&[k, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut patch = Tensor::zeros(&[3, r, r]);
            for c in 0..3 {
                for py in 0..r {
                    for px in 0..r {
                        let sy = mirror(y as isize + py as isize - before, h);
                        let sx = mirror(x as isize + px as isize - before, w);
                        patch.set3(c, py, px, image.at3(c, sy, sx));
                    }
                }
            }
            let s = forward(&patch, params, spec, Mode::Eval).unwrap();
            assert_eq!((s.height(), s.width()), (1, 1));
            for c in 0..k {
                out.set3(c, y, x, s.tensor().at3(c, 0, 0));
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn shift_and_stitch_matches_per_pixel_evaluation() {
    let layouts: [(&[Option<usize>], usize); 3] =
        [(&[None, None], 1), (&[Some(2), None], 2), (&[Some(2), Some(2)], 4)];
    let sizes = [(16, 16), (13, 11), (9, 17), (5, 6), (20, 14)];
    let mut cases = 0;
    for (li, (pools, d)) in layouts.iter().enumerate() {
        let spec = spec_with_pools(pools, 10 + li as u64);
        assert_eq!(spec.downsample_factor(), *d);
        let params = random_params(&spec);
        for (si, &(h, w)) in sizes.iter().enumerate() {
            let image = random_image(h, w, (li * 10 + si) as u64);
            let dense = dense_scores(&image, &params, &spec).unwrap();
            let naive = naive_dense(&image, &params, &spec);
            let err = max_abs_diff(dense.tensor(), &naive);
            assert!(err <= 1e-9, "d={d} {h}x{w}: max diff {err}");
            cases += 1;
        }
    }
    assert!(cases >= 15);
}

#[test]
fn default_network_matches_per_pixel_evaluation() {
    let spec = NetworkSpec::with_defaults(3, 5);
    let params = random_params(&spec);
    let image = random_image(10, 9, 77);
    let dense = dense_scores(&image, &params, &spec).unwrap();
    assert!(max_abs_diff(dense.tensor(), &naive_dense(&image, &params, &spec)) <= 1e-9);
}

#[test]
fn single_pass_when_no_downsampling() {
    let spec = spec_with_pools(&[None, None], 3);
    let params = random_params(&spec);
    let image = random_image(12, 12, 1);
    let r = spec.receptive_field();
    let pad = milseg::densepriors::reflect_pad(&image, (r - 1) / 2, r / 2, (r - 1) / 2, r / 2).unwrap();
    let direct = forward(&pad, &params, &spec, Mode::Eval).unwrap();
    let dense = dense_scores(&image, &params, &spec).unwrap();
    assert_eq!(dense.tensor(), direct.tensor());
}

#[test]
fn constant_image_gives_constant_planes() {
    let spec = NetworkSpec::with_defaults(2, 8);
    let params = random_params(&spec);
    let image = Tensor::filled(&[3, 12, 15], 0.3);
    let dense = dense_scores(&image, &params, &spec).unwrap();
    for c in 0..3 {
        let plane = dense.plane(c);
        assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
    }
}

#[test]
fn upsample_fallback_has_full_resolution() {
    let spec = spec_with_pools(&[Some(2), Some(2)], 4);
    let params = random_params(&spec);
    let image = random_image(18, 13, 3);
    let up = dense_scores_with(&image, &params, &spec, DenseMode::Upsample).unwrap();
    assert_eq!(up.tensor().shape(), &[3, 18, 13]);
    // Pixels whose shift is (0, 0) are exact.
    let exact = dense_scores(&image, &params, &spec).unwrap();
    for c in 0..3 {
        assert!((up.tensor().at3(c, 4, 8) - exact.tensor().at3(c, 4, 8)).abs() < 1e-12);
    }
}
