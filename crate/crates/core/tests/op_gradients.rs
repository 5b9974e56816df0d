//! Reverse-mode gradients of every tape operation against central differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vnode::autodiff::{Tape, Var};
use vnode::tensor::{Conv2dGeometry, ReduceOp, Tensor};
use vnode::volterra::{Activation, VolterraLayerSpec, VolterraMode};

const EPS: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    // Keep magnitudes away from zero so relu/max kinks are not straddled.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Scalar objective `sum(f(inputs) * weights)` with fixed random weights.
fn objective<F>(build: &F, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Largest gradient error relative to the gradient scale of each input.
fn check<F>(build: F, inputs: Vec<Tensor<f64>>, seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let weights = random(tape.value(out).shape(), &mut rng);
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(out, wv).unwrap();
    let root = tape.sum_all(prod);
    let grads = tape.backward(root).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, *v);
        let mut probe = inputs.clone();
        let mut max_err: f64 = 0.0;
        let mut scale: f64 = 1e-3;
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + EPS;
            let up = objective(&build, &probe, &weights);
            probe[i].data_mut()[k] = orig - EPS;
            let down = objective(&build, &probe, &weights);
            probe[i].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * EPS);
            max_err = max_err.max((analytic.data()[k] - fd).abs());
            scale = scale.max(fd.abs());
        }
        worst = worst.max(max_err / scale);
    }
    worst
}

const TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn elementwise_ops(seed in any::<u64>(), n in 1usize..6, s in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&[2, n], &mut rng), random(&[2, n], &mut rng));
        let err = check(
            |t, v| {
                let sum = t.add(v[0], v[1]).unwrap();
                let diff = t.sub(sum, v[1]).unwrap();
                let prod = t.mul(diff, v[1]).unwrap();
                let shifted = t.add_scalar(prod, s);
                let scaled = t.mul_scalar(shifted, s);
                t.axpy(scaled, s, v[0]).unwrap()
            },
            vec![a, b],
            seed,
        );
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn activations(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[n, 3], &mut rng);
        let err = check(
            |t, v| {
                let r = t.relu(v[0]);
                let h = t.tanh(v[0]);
                t.add(r, h).unwrap()
            },
            vec![a],
            seed,
        );
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn convolution(
        seed in any::<u64>(),
        stride in 1usize..3,
        padding in 0usize..3,
        groups in prop::sample::select(vec![1usize, 2]),
        k in prop::sample::select(vec![1usize, 2, 3]),
        batch in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[batch, 4, 5, 6], &mut rng);
        let w = random(&[4, 4 / groups, k, k], &mut rng);
        let b = random(&[4], &mut rng);
        let geom = Conv2dGeometry::new(stride, padding, groups);
        let err = check(|t, v| t.conv2d(v[0], v[1], Some(v[2]), geom).unwrap(), vec![x, w, b], seed);
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn dense_ops(seed in any::<u64>(), m in 1usize..4, k in 1usize..5, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&[m, k], &mut rng), random(&[k, n], &mut rng));
        let err = check(|t, v| t.matmul(v[0], v[1]).unwrap(), vec![a.clone(), b], seed);
        prop_assert!(err < TOL, "matmul relative error {err}");
        let (w, bias) = (random(&[n, k], &mut rng), random(&[n], &mut rng));
        let err = check(|t, v| t.linear(v[0], v[1], v[2]).unwrap(), vec![a, w, bias], seed);
        prop_assert!(err < TOL, "linear relative error {err}");
    }

    #[test]
    fn reductions_and_softmax(seed in any::<u64>(), axis in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[3, 4], &mut rng);
        for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Max] {
            let err = check(|t, v| t.reduce(v[0], op, axis).unwrap(), vec![a.clone()], seed);
            prop_assert!(err < TOL, "{op:?} relative error {err}");
        }
        let err = check(|t, v| t.softmax(v[0], axis).unwrap(), vec![a.clone()], seed);
        prop_assert!(err < TOL, "softmax relative error {err}");
        let err = check(|t, v| {
            let s = t.sum_all(v[0]);
            let m = t.mean_all(v[0]);
            t.add(s, m).unwrap()
        }, vec![a], seed);
        prop_assert!(err < TOL, "sum/mean relative error {err}");
    }

    #[test]
    fn shape_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&[2, 3, 4, 4], &mut rng), random(&[2, 1, 4, 4], &mut rng));
        let err = check(
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1).unwrap();
                let p = t.avgpool2d(c, 2).unwrap();
                let r = t.reshape(p, &[2, 4, 4]).unwrap();
                t.flatten(r).unwrap()
            },
            vec![a.clone(), b],
            seed,
        );
        prop_assert!(err < TOL, "relative error {err}");
        let err = check(|t, v| t.global_avgpool2d(v[0]).unwrap(), vec![a], seed);
        prop_assert!(err < TOL, "global pool relative error {err}");
    }

    #[test]
    fn cross_entropy(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[n, 5], &mut rng);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let err = check(
            |t, v| {
                let p = t.softmax(v[0], 1).unwrap();
                t.nll_from_probs(p, &targets, 1e-12).unwrap()
            },
            vec![logits],
            seed,
        );
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn volterra_layers(
        seed in any::<u64>(),
        rank in 0usize..3,
        stride in 1usize..3,
        groups in prop::sample::select(vec![1usize, 2]),
        naive in any::<bool>(),
        activation in prop::sample::select(vec![Activation::Identity, Activation::Tanh]),
    ) {
        let mode = if naive { VolterraMode::NaiveFull } else { VolterraMode::LowRank };
        let spec = VolterraLayerSpec::new(2, 4, 3, rank)
            .with_stride(stride)
            .with_groups(groups)
            .with_mode(mode)
            .with_activation(activation);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = vec![random(&[2, 2, 5, 5], &mut rng)];
        inputs.extend(spec.param_shapes().iter().map(|(_, s)| random(s, &mut rng)));
        let err = check(|t, v| spec.forward(t, v[0], &v[1..]).unwrap(), inputs, seed);
        prop_assert!(err < TOL, "relative error {err}");
    }
}
