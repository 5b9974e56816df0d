use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vnode::autodiff::{Tape, Var};
use vnode::tensor::{Conv2dGeometry, Tensor};
use vnode::volterra::{
    volterra_forward_lowrank, volterra_forward_naive, VolterraLayer, VolterraLayerSpec, VolterraMode,
};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_spec(rng: &mut ChaCha8Rng) -> VolterraLayerSpec {
    let groups = [1, 2][rng.gen_range(0..2)];
    let cin = groups * rng.gen_range(1..3);
    let cout = groups * rng.gen_range(1..3);
    let k = [1, 2, 3][rng.gen_range(0..3)];
    VolterraLayerSpec::new(cin, cout, k, rng.gen_range(1..4))
        .with_stride(rng.gen_range(1..3))
        .with_padding(rng.gen_range(0..2))
        .with_groups(groups)
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.data().iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Direct double sum over each receptive field, written from the filter
/// definition with no convolution machinery. `w2` is `[Cout, P, P]` with `P`
/// indexing `(channel-in-group, row, col)` of the window.
fn direct_second_order(
    x: &Tensor<f64>,
    spec: &VolterraLayerSpec,
    w1: &Tensor<f64>,
    bias: &Tensor<f64>,
    w2: &[f64],
) -> Tensor<f64> {
    let [n, cin, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (kh, kw) = spec.kernel;
    let (s, pad, g) = (spec.stride, spec.padding, spec.groups);
    let oh = (h + 2 * pad - kh) / s + 1;
    let ow = (w + 2 * pad - kw) / s + 1;
    let cin_g = cin / g;
    let cout_g = spec.out_channels / g;
    let p = cin_g * kh * kw;
    let mut out = Vec::with_capacity(n * spec.out_channels * oh * ow);
    let mut window = vec![0.0; p];
    for b in 0..n {
        for o in 0..spec.out_channels {
            let grp = o / cout_g;
            for i in 0..oh {
                for j in 0..ow {
                    for c in 0..cin_g {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (r, col) =
                                    ((i * s + u) as isize - pad as isize, (j * s + v) as isize - pad as isize);
                                let inside = r >= 0 && col >= 0 && (r as usize) < h && (col as usize) < w;
                                window[(c * kh + u) * kw + v] = if inside {
                                    x.data()[((b * cin + grp * cin_g + c) * h + r as usize) * w + col as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                    let mut acc = bias.data()[o];
                    for k in 0..p {
                        acc += w1.data()[o * p + k] * window[k];
                        for l in 0..p {
                            acc += w2[(o * p + k) * p + l] * window[k] * window[l];
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(&[n, spec.out_channels, oh, ow], out).unwrap()
}

#[test]
fn naive_and_low_rank_agree_on_random_instances() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let params = spec.param_shapes().iter().map(|(_, s)| random(s, &mut rng)).collect();
        let low = VolterraLayer::new(spec.clone(), params).unwrap();
        let full = low.to_full().unwrap();
        let side = rng.gen_range(3..7);
        let x = random(&[2, spec.in_channels, side, side + 1], &mut rng);
        let y_low = volterra_forward_lowrank(&x, &low).unwrap();
        let y_full = volterra_forward_naive(&x, &full).unwrap();
        let oracle = direct_second_order(&x, &spec, &low.params[0], &low.params[1], full.params[2].data());
        worst = worst.max(max_rel(&y_low, &y_full)).max(max_rel(&y_low, &oracle));
    }
    assert!(worst < 1e-10, "worst relative deviation {worst:e}");
}

#[test]
fn rank_zero_is_a_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = VolterraLayerSpec::new(3, 4, 3, 0).with_padding(1);
    let layer = VolterraLayer::<f64>::random(spec.clone(), &mut rng).unwrap();
    let x = random(&[2, 3, 5, 5], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(layer.params[0].clone());
    let bias = tape.constant(layer.params[1].clone());
    let conv = tape.conv2d(xv, w, Some(bias), spec.geometry()).unwrap();
    assert_eq!(&layer.forward(&x).unwrap(), tape.value(conv));
}

/// Composes the low-rank layer from tape primitives; the fused operator must
/// match it in values and in every gradient.
fn composed(tape: &mut Tape<f64>, spec: &VolterraLayerSpec, x: Var, p: &[Var]) -> Var {
    let geom: Conv2dGeometry = spec.geometry();
    let mut y = tape.conv2d(x, p[0], Some(p[1]), geom).unwrap();
    for pair in p[2..].chunks_exact(2) {
        let a = tape.conv2d(x, pair[0], None, geom).unwrap();
        let b = tape.conv2d(x, pair[1], None, geom).unwrap();
        let ab = tape.mul(a, b).unwrap();
        y = tape.add(y, ab).unwrap();
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_low_rank_matches_composition(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let layer = VolterraLayer::<f64>::random(spec.clone(), &mut rng).unwrap();
        let x = random(&[2, spec.in_channels, 5, 6], &mut rng);
        let out_shape = spec.output_shape(x.shape()).unwrap();
        let seed_grad = random(&out_shape, &mut rng);

        let run = |fused: bool| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let ps: Vec<Var> = layer.params.iter().map(|p| tape.param(p.clone())).collect();
            let y = if fused { spec.forward(&mut tape, xv, &ps).unwrap() } else { composed(&mut tape, &spec, xv, &ps) };
            let value = tape.value(y).clone();
            let grads = tape.vjp(y, seed_grad.clone()).unwrap();
            let mut all = vec![value, grads.get_or_zeros(&tape, xv)];
            all.extend(ps.iter().map(|&p| grads.get_or_zeros(&tape, p)));
            all
        };
        for (f, c) in run(true).iter().zip(run(false).iter()) {
            prop_assert!(max_rel(f, c) < 1e-12, "deviation {:e}", max_rel(f, c));
        }
    }

    /// Without the linear part the filter is a homogeneous quadratic form.
    #[test]
    fn quadratic_term_is_homogeneous_of_degree_two(seed in any::<u64>(), alpha in -3.0f64..3.0, naive in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let mut layer = VolterraLayer::<f64>::random(spec.clone(), &mut rng).unwrap();
        if naive {
            layer = layer.to_full().unwrap();
        }
        layer.params[0] = Tensor::zeros(layer.params[0].shape());
        let x = random(&[1, spec.in_channels, 4, 5], &mut rng);
        let y = layer.forward(&x).unwrap();
        let scaled = layer.forward(&x.map(|v| alpha * v)).unwrap();
        let expected = y.map(|v| alpha * alpha * v);
        let scale = expected.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in scaled.data().iter().zip(expected.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    /// The linear part alone is homogeneous of degree one.
    #[test]
    fn linearized_layer_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let layer = VolterraLayer::<f64>::random(spec.clone(), &mut rng).unwrap().linearized();
        let x = random(&[1, spec.in_channels, 4, 5], &mut rng);
        let y = layer.forward(&x).unwrap();
        let scaled = layer.forward(&x.map(|v| alpha * v)).unwrap();
        for (a, b) in scaled.data().iter().zip(y.data()) {
            prop_assert!((a - alpha * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn naive_mode_round_trips_through_full_kernel(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let full = VolterraLayer::<f64>::random(spec.with_mode(VolterraMode::NaiveFull), &mut rng).unwrap();
        let x = random(&[1, full.spec.in_channels, 4, 4], &mut rng);
        let oracle = direct_second_order(&x, &full.spec, &full.params[0], &full.params[1], full.params[2].data());
        prop_assert!(max_rel(&full.forward(&x).unwrap(), &oracle) < 1e-12);
    }
}
