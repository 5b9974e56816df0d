use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vnode::checkpoint::{self, Checkpoint};
use vnode::config::RunConfig;
use vnode::data::{self, AugmentPolicy, Dataset, Normalization, Split};
use vnode::model::VnodeModel;
use vnode::ode::GradMode;
use vnode::trainer::{epoch_checkpoint_name, fit, LoopConfig, OptimizerConfig, Trainer, METRICS_FILE};

const EPOCHS: usize = 4;

fn dataset(split: Split, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * 3 * 8 * 8).map(|_| rng.gen()).collect();
    let labels = (0..n).map(|i| (i % 4) as u8).collect();
    Dataset::new(split, [3, 8, 8], 4, pixels, labels).unwrap()
}

fn trainer(seed: u64) -> Trainer<f32> {
    let text = r#"
        [model]
        input_shape = [3, 8, 8]
        num_classes = 4
        stages = 2
        channels = 4
        rank = 1
        strides = [1, 2]
        dynamics_activation = "tanh"
        [model.solver]
        steps = 2
    "#;
    let cfg = RunConfig::from_toml_str(text, &[]).unwrap().model_config().unwrap();
    let model = VnodeModel::init(cfg, &mut data::stream_rng(seed, data::INIT_STREAM, 0)).unwrap();
    Trainer::new(model, OptimizerConfig::adam(0.01), None, GradMode::Adjoint).unwrap()
}

fn loop_config(out: &Path) -> LoopConfig {
    LoopConfig {
        epochs: EPOCHS,
        batch_size: 6,
        eval_batch_size: 16,
        seed: 9,
        augment: Some(AugmentPolicy::default()),
        max_batches_per_epoch: None,
        checkpoint_every: 1,
        out_dir: Some(out.to_path_buf()),
        provenance: "seed=9".into(),
    }
}

/// Metrics rows without the wall-clock column.
fn rows_without_seconds(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| match l.rsplit_once(',') {
            Some((head, _)) if !l.starts_with('#') => head.to_string(),
            _ => l.to_string(),
        })
        .collect()
}

#[test]
fn fixed_seed_runs_repeat_and_resume_continues_exactly() {
    let (train, test) = (dataset(Split::Train, 20, 1), dataset(Split::Test, 8, 2));
    let norm = Normalization::fit(&train);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));

    let mut first = trainer(9);
    let rec_a = fit(&mut first, &train, &test, &norm, &loop_config(&a), 0).unwrap();
    let mut second = trainer(9);
    fit(&mut second, &train, &test, &norm, &loop_config(&b), 0).unwrap();
    assert_eq!(rows_without_seconds(&a), rows_without_seconds(&b));
    assert_eq!(first.model.params, second.model.params);
    assert_eq!(rows_without_seconds(&a).len(), 2 + EPOCHS);

    // Interrupt after epoch 2: copy the run so far, then resume from its checkpoint.
    let mut partial = trainer(9);
    let mut cfg = loop_config(&c);
    cfg.epochs = 2;
    fit(&mut partial, &train, &test, &norm, &cfg, 0).unwrap();
    let ck: Checkpoint<f32> = checkpoint::load(&c.join(epoch_checkpoint_name(2))).unwrap();
    assert_eq!(ck.epoch, 2);
    let (kind, state) = ck.optimizer.unwrap();
    let mut resumed = Trainer::new(ck.model, OptimizerConfig::adam(0.01), None, GradMode::Adjoint).unwrap();
    assert_eq!(kind, resumed.optimizer.kind);
    resumed.state = state;
    let rec_c = fit(&mut resumed, &train, &test, &norm, &loop_config(&c), 2).unwrap();

    assert_eq!(rec_c.len(), EPOCHS - 2);
    assert_eq!(rec_c.last().unwrap().epoch, EPOCHS);
    let strip =
        |r: &vnode::trainer::MetricsRecord| (r.epoch, r.stage_losses.clone(), r.total_loss, r.train_acc, r.test_acc);
    assert_eq!(strip(rec_c.last().unwrap()), strip(rec_a.last().unwrap()));
    assert_eq!(resumed.model.params, first.model.params);
    assert_eq!(rows_without_seconds(&c), rows_without_seconds(&a));
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let t = trainer(3);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    let ck = Checkpoint {
        model: t.model.clone(),
        optimizer: Some((t.optimizer.kind, t.state.clone())),
        epoch: 7,
        seed: 3,
        normalization: Some(Normalization::identity(3)),
    };
    checkpoint::save(&path, &ck).unwrap();
    let back: Checkpoint<f32> = checkpoint::load(&path).unwrap();
    assert_eq!(back.model.params, ck.model.params);
    assert_eq!(back.model.config, ck.model.config);
    assert_eq!((back.epoch, back.seed), (7, 3));

    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        checkpoint::load::<f32>(&path),
        Err(vnode::Error::Checkpoint(_))
    ));
}
