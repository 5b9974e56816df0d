use std::path::PathBuf;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vnode::config::RunConfig;
use vnode::model::{VnodeModel, VnodeModelConfig};

fn load(name: &str, overrides: &[&str]) -> VnodeModelConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_file(&path, &overrides).unwrap().model_config().unwrap()
}

/// Low-rank layer: `(1 + 2Q)` kernels of `cout * cin/g * k * k` plus a bias.
fn layer_params(cin: u64, cout: u64, k: u64, q: u64, g: u64) -> u64 {
    (1 + 2 * q) * cout * (cin / g) * k * k + cout
}

/// `2 * MACs` per convolution and one multiply per output per factor pair.
fn layer_flops(cin: u64, cout: u64, k: u64, q: u64, g: u64, out_hw: u64) -> u64 {
    let out = cout * out_hw;
    (1 + 2 * q) * 2 * out * (cin / g) * k * k + q * out
}

#[test]
fn default_three_stage_cifar_hand_count() {
    let cfg = load("cifar-m3.toml", &[]);
    let head = 32 * 10 + 10;
    let params = layer_params(3, 32, 3, 4, 1) + 5 * layer_params(32, 32, 3, 4, 1) + 3 * head;
    assert_eq!(params, 423_678);
    assert_eq!(cfg.count_params().unwrap(), params);

    let evals = 4 * 8;
    let mut flops = 0;
    for (cin, hw) in [(3, 32 * 32), (32, 16 * 16), (32, 8 * 8)] {
        flops += layer_flops(cin, 32, 3, 4, 1, hw) + evals * layer_flops(32, 32, 3, 4, 1, hw) + 2 * 32 * 10;
    }
    assert_eq!(flops, 7_209_199_488);
    assert_eq!(cfg.count_flops().unwrap(), flops);

    let model = VnodeModel::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(model.num_scalars() as u64, params);
}

#[test]
fn single_stage_cifar_hand_count() {
    let cfg = load("cifar-m1.toml", &[]);
    let params = layer_params(3, 64, 3, 4, 1) + layer_params(64, 64, 3, 4, 1) + 64 * 10 + 10;
    assert_eq!(params, 348_106);
    assert_eq!(cfg.count_params().unwrap(), params);
    let hw = 32 * 32;
    let flops = layer_flops(3, 64, 3, 4, 1, hw) + 32 * layer_flops(64, 64, 3, 4, 1, hw) + 2 * 64 * 10;
    assert_eq!(cfg.count_flops().unwrap(), flops);
    let c = &cfg.stage_counts().unwrap()[0];
    assert_eq!(
        c.flops().unwrap(),
        c.filter_flops + 32 * c.dynamics_flops_per_eval + c.head_flops
    );
}

#[test]
fn toy_config_hand_count() {
    let cfg = load("toy-two-layer.toml", &[]);
    assert_eq!(cfg.count_params().unwrap(), 254);
    assert_eq!(cfg.count_flops().unwrap(), 3752);
}

#[test]
fn adaptive_solvers_have_no_fixed_flop_count() {
    let cfg = load("toy-two-layer.toml", &["model.solver.method=\"dopri5\""]);
    assert!(cfg.count_flops().is_err());
    assert!(cfg.stage_counts().unwrap().iter().all(|c| c.evals.is_none()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn totals_are_sums_of_stages(
        stages in 1usize..4,
        channels in prop::sample::select(vec![4usize, 8]),
        rank in 0usize..4,
        steps in 1usize..6,
        euler in any::<bool>(),
    ) {
        let method = if euler { "euler" } else { "rk4" };
        let cfg = load("toy-two-layer.toml", &[
            &format!("model.stages={stages}"),
            &format!("model.strides={:?}", vec![1; stages]),
            &format!("model.channels={channels}"),
            &format!("model.rank={rank}"),
            &format!("model.solver.steps={steps}"),
            &format!("model.solver.method=\"{method}\""),
        ]);
        let counts = cfg.stage_counts().unwrap();
        prop_assert_eq!(counts.len(), stages);
        prop_assert_eq!(cfg.count_params().unwrap(), counts.iter().map(|c| c.params()).sum::<u64>());
        prop_assert_eq!(cfg.count_flops().unwrap(), counts.iter().map(|c| c.flops().unwrap()).sum::<u64>());
        let per_step = if euler { 1 } else { 4 };
        for c in &counts {
            prop_assert_eq!(c.evals, Some((per_step * steps) as u64));
        }
        let model = VnodeModel::<f64>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(model.num_scalars() as u64, cfg.count_params().unwrap());
    }

    #[test]
    fn doubling_steps_doubles_dynamics_flops(steps in 1usize..10, stages in 1usize..3) {
        let base = ["model.solver.method=\"rk4\"".to_string(), format!("model.stages={stages}"), format!("model.strides={:?}", vec![1; stages])];
        let with = |n: usize| {
            let mut o: Vec<&str> = base.iter().map(String::as_str).collect();
            let s = format!("model.solver.steps={n}");
            o.push(&s);
            load("toy-two-layer.toml", &o).stage_counts().unwrap()
        };
        let (one, two) = (with(steps), with(2 * steps));
        for (a, b) in one.iter().zip(&two) {
            prop_assert_eq!(2 * a.dynamics_flops().unwrap(), b.dynamics_flops().unwrap());
            prop_assert_eq!(a.filter_flops, b.filter_flops);
            prop_assert_eq!(a.params(), b.params());
        }
    }

    #[test]
    fn linear_ablation_removes_exactly_the_factors(rank in 1usize..5) {
        let cfg = load("toy-two-layer.toml", &[&format!("model.rank={rank}")]);
        let lin = cfg.linear_ablation();
        let removed = cfg.count_params().unwrap() - lin.count_params().unwrap();
        let factors: u64 = cfg
            .stages
            .iter()
            .flat_map(|s| s.filter.branches.iter().chain(std::iter::once(&s.dynamics)))
            .map(|l| 2 * l.rank as u64 * (l.out_channels * l.in_channels / l.groups * l.kernel.0 * l.kernel.1) as u64)
            .sum();
        prop_assert_eq!(removed, factors);
    }
}
