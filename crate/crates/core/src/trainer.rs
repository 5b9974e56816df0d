//! Multi-stage cross-entropy objective, optimizers, training loop and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, AugmentPolicy, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, ForwardOptions, VnodeModel};
use crate::ode::GradMode;
use crate::tensor::{Element, Tensor};

/// Floor applied to probabilities inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// `-ln(max(p[label], 1e-12))` for one probability vector.
pub fn cross_entropy<T: Element>(probs: &[T], label: usize) -> Result<T> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::contract(format!("class {label} outside {} classes", probs.len())))?;
    Ok(-p.max(T::lit(LOG_FLOOR)).ln())
}

/// Weighted sum of per-stage losses.
pub fn total_loss<T: Element>(stage_losses: &[T], weights: &[f64]) -> Result<T> {
    if stage_losses.len() != weights.len() {
        return Err(Error::config(format!(
            "{} stage-loss weights for {} stages",
            weights.len(),
            stage_losses.len()
        )));
    }
    Ok(stage_losses
        .iter()
        .zip(weights)
        .fold(T::zero(), |acc, (&l, &w)| acc + T::lit(w) * l))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdMomentum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
    /// Multiply by `gamma` every `step_epochs` epochs.
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub step_epochs: usize,
    pub gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            step_epochs: 10,
            gamma: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            lr,
            momentum,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::config("Adam needs betas in [0,1) and eps > 0"));
        }
        if self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("momentum and weight decay must be >= 0"));
        }
        if self.schedule == LrSchedule::Step && self.step_epochs == 0 {
            return Err(Error::config("step schedule needs step_epochs >= 1"));
        }
        Ok(())
    }

    /// Learning rate for zero-based `epoch` of `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = epoch as f64 / epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            LrSchedule::Step => self.lr * self.gamma.powi((epoch / self.step_epochs) as i32),
        }
    }

    pub fn init_state<T: Element>(&self, params: &[Tensor<T>]) -> OptimizerState<T> {
        let copies = match self.kind {
            OptimizerKind::Adam => 2,
            OptimizerKind::SgdMomentum => 1,
        };
        let mut slots = Vec::with_capacity(copies * params.len());
        for _ in 0..copies {
            slots.extend(params.iter().map(|p| Tensor::zeros(p.shape())));
        }
        OptimizerState { step: 0, slots }
    }

    /// One update of `params` in place.
    pub fn update<T: Element>(
        &self,
        state: &mut OptimizerState<T>,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        let n = params.len();
        if grads.len() != n || state.slots.len() % n.max(1) != 0 {
            return Err(Error::contract("optimizer state does not match the parameter list"));
        }
        state.step += 1;
        let lr = T::lit(lr);
        let wd = T::lit(self.weight_decay);
        let (first, second) = state.slots.split_at_mut(n);
        for i in 0..n {
            let p = params[i].data_mut();
            let g = grads[i].data();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = T::lit(self.momentum);
                    let v = first[i].data_mut();
                    for k in 0..p.len() {
                        let gk = g[k] + wd * p[k];
                        v[k] = mu * v[k] + gk;
                        p[k] = p[k] - lr * v[k];
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
                    let c1 = T::one() - b1.powi(state.step as i32);
                    let c2 = T::one() - b2.powi(state.step as i32);
                    let eps = T::lit(self.eps);
                    let m = first[i].data_mut();
                    let v = second[i].data_mut();
                    for k in 0..p.len() {
                        let gk = g[k] + wd * p[k];
                        m[k] = b1 * m[k] + (T::one() - b1) * gk;
                        v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                        let mhat = m[k] / c1;
                        let vhat = v[k] / c2;
                        p[k] = p[k] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Step counter and moment buffers (Adam: first moments then second; SGD: velocities).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Element> {
    pub step: u64,
    pub slots: Vec<Tensor<T>>,
}

/// Loss, predictions and parameter gradients for one batch.
#[derive(Clone, Debug)]
pub struct LossGradients<T: Element> {
    pub stage_losses: Vec<f64>,
    pub total: f64,
    /// Final-stage class decisions.
    pub classes: Vec<usize>,
    pub grads: Vec<Tensor<T>>,
    pub forward_fevals: u64,
    pub backward_fevals: u64,
}

fn record_losses<T: Element>(
    tape: &mut Tape<T>,
    probs: &[Var],
    labels: &[usize],
    weights: &[f64],
) -> Result<(Vec<Var>, Var)> {
    if probs.len() != weights.len() {
        return Err(Error::config(format!(
            "{} stage-loss weights for {} stages",
            weights.len(),
            probs.len()
        )));
    }
    let mut losses = Vec::with_capacity(probs.len());
    let mut total: Option<Var> = None;
    for (&p, &w) in probs.iter().zip(weights) {
        let l = tape.nll_from_probs(p, labels, T::lit(LOG_FLOOR))?;
        losses.push(l);
        let term = tape.mul_scalar(l, T::lit(w));
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((losses, total.expect("at least one stage")))
}

/// Mean multi-stage loss over the batch and its gradient for every parameter.
pub fn loss_and_gradients<T: Element>(
    model: &VnodeModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    weights: &[f64],
    opts: &ForwardOptions,
) -> Result<LossGradients<T>> {
    let counter = Arc::new(AtomicU64::new(0));
    let opts = ForwardOptions {
        backward_fevals: Some(counter.clone()),
        ..opts.clone()
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ps: Vec<Var> = model.params.iter().map(|p| tape.param(p.clone())).collect();
    let fwd = model.record(&mut tape, xv, &ps, &opts)?;
    let (losses, total) = record_losses(&mut tape, &fwd.probs, labels, weights)?;
    let stage_losses: Vec<f64> = losses
        .iter()
        .map(|&l| tape.value(l).data()[0].to_f64_lossless())
        .collect();
    let classes = argmax_rows(tape.value(*fwd.probs.last().expect("stage")));
    let mut g = tape.backward(total)?;
    let grads = ps
        .iter()
        .map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    Ok(LossGradients {
        stage_losses,
        total: tape.value(total).data()[0].to_f64_lossless(),
        classes,
        grads,
        forward_fevals: fwd.stats.fevals,
        backward_fevals: counter.load(Ordering::Relaxed),
    })
}

/// Mean multi-stage loss without gradients.
pub fn batch_loss<T: Element>(
    model: &VnodeModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    weights: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ps: Vec<Var> = model.params.iter().map(|p| tape.constant(p.clone())).collect();
    let fwd = model.record(&mut tape, xv, &ps, &ForwardOptions::default())?;
    let (losses, total) = record_losses(&mut tape, &fwd.probs, labels, weights)?;
    Ok((
        losses
            .iter()
            .map(|&l| tape.value(l).data()[0].to_f64_lossless())
            .collect(),
        tape.value(total).data()[0].to_f64_lossless(),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub stage_losses: Vec<f64>,
    pub total: f64,
    pub correct: usize,
    pub fevals: u64,
}

/// Model, optimizer and objective settings for gradient steps.
#[derive(Clone, Debug)]
pub struct Trainer<T: Element> {
    pub model: VnodeModel<T>,
    pub optimizer: OptimizerConfig,
    pub state: OptimizerState<T>,
    pub weights: Vec<f64>,
    pub grad_mode: GradMode,
}

impl<T: Element> Trainer<T> {
    /// `weights = None` means uniform stage weights.
    pub fn new(
        model: VnodeModel<T>,
        optimizer: OptimizerConfig,
        weights: Option<Vec<f64>>,
        grad_mode: GradMode,
    ) -> Result<Self> {
        optimizer.validate()?;
        let m = model.config.num_stages();
        let weights = weights.unwrap_or_else(|| vec![1.0; m]);
        if weights.len() != m {
            return Err(Error::config(format!(
                "{} stage-loss weights for {m} stages",
                weights.len()
            )));
        }
        let state = optimizer.init_state(&model.params);
        Ok(Self {
            model,
            optimizer,
            state,
            weights,
            grad_mode,
        })
    }

    /// One optimizer update from the batch gradient; `batch` only labels diagnostics.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize], lr: f64, batch: usize) -> Result<StepReport> {
        let opts = ForwardOptions {
            mode: self.grad_mode,
            ..ForwardOptions::default()
        };
        let lg = loss_and_gradients(&self.model, x, labels, &self.weights, &opts).map_err(|e| match e {
            Error::Divergence { context, detail } => Error::Divergence {
                context: format!("batch {batch}, {context}"),
                detail,
            },
            other => other,
        })?;
        if let Some(m) = lg.stage_losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::Divergence {
                context: format!("batch {batch}, stage {}", m + 1),
                detail: format!("loss is {}", lg.stage_losses[m]),
            });
        }
        for (info, g) in self.model.param_infos().iter().zip(&lg.grads) {
            g.ensure_finite(&format!(
                "batch {batch}, stage {} gradient of {}",
                info.stage + 1,
                info.name
            ))?;
        }
        self.optimizer
            .update(&mut self.state, &mut self.model.params, &lg.grads, lr)?;
        let correct = lg.classes.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(StepReport {
            stage_losses: lg.stage_losses,
            total: lg.total,
            correct,
            fevals: lg.forward_fevals + lg.backward_fevals,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Final-stage accuracy.
    pub accuracy: f64,
    pub stage_accuracies: Vec<f64>,
    pub stage_losses: Vec<f64>,
    /// Mean weighted multi-stage loss.
    pub mean_loss: f64,
}

/// Deterministic evaluation over a whole split in index order.
pub fn evaluate<T: Element>(
    model: &VnodeModel<T>,
    data: &Dataset,
    norm: &Normalization,
    batch_size: usize,
    weights: &[f64],
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let m = model.config.num_stages();
    let mut correct = vec![0usize; m];
    let mut losses = vec![0.0f64; m];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.gather::<T>(chunk);
        let pred = model.forward(&norm.normalize(&x)?)?;
        for (s, probs) in pred.stage_probs.iter().enumerate() {
            let rows = probs.data().chunks_exact(model.config.num_classes);
            for ((row, &y), guess) in rows.zip(&labels).zip(argmax_rows(probs)) {
                losses[s] += cross_entropy(row, y)?.to_f64_lossless();
                correct[s] += (guess == y) as usize;
            }
        }
    }
    let n = data.len() as f64;
    let stage_losses: Vec<f64> = losses.iter().map(|l| l / n).collect();
    let stage_accuracies: Vec<f64> = correct.iter().map(|&c| c as f64 / n).collect();
    Ok(EvalReport {
        accuracy: stage_accuracies[m - 1],
        mean_loss: total_loss(&stage_losses, weights)?,
        stage_accuracies,
        stage_losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub stage_losses: Vec<f64>,
    pub total_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Mean derivative evaluations (forward and backward) per training batch.
    pub fevals: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn csv_header(stages: usize) -> String {
        let mut cols = vec!["epoch".to_string()];
        cols.extend((1..=stages).map(|m| format!("loss_s{m}")));
        cols.extend(["total_loss", "train_acc", "test_acc", "fevals", "seconds"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.epoch.to_string()];
        cols.extend(self.stage_losses.iter().map(|l| format!("{l:.8}")));
        cols.push(format!("{:.8}", self.total_loss));
        cols.push(format!("{:.6}", self.train_acc));
        cols.push(format!("{:.6}", self.test_acc));
        cols.push(format!("{:.1}", self.fevals));
        cols.push(format!("{:.3}", self.seconds));
        cols.join(",")
    }
}

/// Append-only metrics CSV: a `# key=value` provenance line, the column
/// header, then one row per epoch.
pub struct MetricsCsv {
    path: PathBuf,
}

impl MetricsCsv {
    /// Creates the file, or when resuming after `resume_epoch` keeps the rows
    /// up to that epoch and drops later ones.
    pub fn open(path: &Path, provenance: &str, stages: usize, resume_epoch: Option<usize>) -> Result<Self> {
        let header = format!("# {provenance}\n{}\n", MetricsRecord::csv_header(stages));
        let mut text = header.clone();
        if let (Some(done), Ok(existing)) = (resume_epoch, fs::read_to_string(path)) {
            text = String::new();
            for line in existing.lines() {
                let keep = match line.split(',').next().and_then(|e| e.parse::<usize>().ok()) {
                    Some(epoch) => epoch <= done,
                    None => true,
                };
                if keep {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn append(&self, record: &MetricsRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", record.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Training-loop settings.
#[derive(Clone, Debug)]
pub struct LoopConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub augment: Option<AugmentPolicy>,
    /// Cap on training batches per epoch (desk-scale budgets).
    pub max_batches_per_epoch: Option<usize>,
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
    /// Written to the metrics CSV's first line.
    pub provenance: String,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

/// Trains from epoch `start_epoch + 1` through `cfg.epochs`, evaluating on
/// `test` after every epoch. Batch order and augmentation for each epoch are
/// derived from `(seed, epoch)`, so resuming from a checkpoint continues the
/// same sequence.
pub fn fit<T: Element>(
    trainer: &mut Trainer<T>,
    train: &Dataset,
    test: &Dataset,
    norm: &Normalization,
    cfg: &LoopConfig,
    start_epoch: usize,
) -> Result<Vec<MetricsRecord>> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("batch size and epochs must be positive"));
    }
    let stages = trainer.model.config.num_stages();
    let csv = match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let resume = (start_epoch > 0).then_some(start_epoch);
            Some(MetricsCsv::open(
                &dir.join(METRICS_FILE),
                &cfg.provenance,
                stages,
                resume,
            )?)
        }
        None => None,
    };
    let mut records = Vec::new();
    for epoch in start_epoch + 1..=cfg.epochs {
        let started = Instant::now();
        let lr = trainer.optimizer.lr_at(epoch - 1, cfg.epochs);
        let mut order_rng = data::stream_rng(cfg.seed, data::SHUFFLE_STREAM, epoch as u64);
        let mut aug_rng = data::stream_rng(cfg.seed, data::AUGMENT_STREAM, epoch as u64);
        let mut plan = data::batches(train.len(), cfg.batch_size, &mut order_rng)?;
        if let Some(cap) = cfg.max_batches_per_epoch {
            plan.truncate(cap.max(1));
        }
        let mut losses = vec![0.0; stages];
        let mut total = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        let mut fevals = 0u64;
        for (b, idx) in plan.iter().enumerate() {
            let (x, labels) = train.gather::<T>(idx);
            let x = match &cfg.augment {
                Some(policy) => data::augment(&x, policy, &mut aug_rng),
                None => x,
            };
            let step = trainer.train_step(&norm.normalize(&x)?, &labels, lr, b)?;
            let n = idx.len() as f64;
            losses.iter_mut().zip(&step.stage_losses).for_each(|(a, l)| *a += l * n);
            total += step.total * n;
            correct += step.correct;
            seen += idx.len();
            fevals += step.fevals;
            if (b + 1) % 50 == 0 {
                log::info!("epoch {epoch} batch {}/{} loss {:.4}", b + 1, plan.len(), step.total);
            }
        }
        let test_report = evaluate(&trainer.model, test, norm, cfg.eval_batch_size, &trainer.weights)?;
        let record = MetricsRecord {
            epoch,
            stage_losses: losses.iter().map(|l| l / seen as f64).collect(),
            total_loss: total / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc: test_report.accuracy,
            fevals: fevals as f64 / plan.len() as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train_acc {:.4} test_acc {:.4} ({:.1}s)",
            record.total_loss,
            record.train_acc,
            record.test_acc,
            record.seconds
        );
        if let Some(csv) = &csv {
            csv.append(&record)?;
        }
        if let Some(dir) = &cfg.out_dir {
            let ck = Checkpoint {
                model: trainer.model.clone(),
                optimizer: Some((trainer.optimizer.kind, trainer.state.clone())),
                epoch: epoch as u64,
                seed: cfg.seed,
                normalization: Some(norm.clone()),
            };
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.join(epoch_checkpoint_name(epoch)), &ck)?;
            }
            if epoch == cfg.epochs {
                checkpoint::save(&dir.join(FINAL_CHECKPOINT), &ck)?;
            }
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0f64, 1.0, 0.0], 1).unwrap(), 0.0);
        let uniform = [0.1f64; 10];
        assert!((cross_entropy(&uniform, 3).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[1.0f64, 0.0], 1).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(matches!(cross_entropy(&[0.5f64, 0.5], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(&[0.7], &[1.0]).unwrap(), 0.7);
        assert_eq!(total_loss(&[0.2, 0.3, 0.9], &[0.0, 0.0, 1.0]).unwrap(), 0.9);
        assert!((total_loss(&[0.5f64, 0.5, 0.5], &[1.0; 3]).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(total_loss(&[0.5, 0.5], &[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn sgd_contracts_quadratic() {
        // f(p) = p^2 with plain SGD: p_k = (1 - 2 lr)^k p_0
        let opt = OptimizerConfig::sgd(0.1, 0.0);
        let mut p = vec![Tensor::<f64>::from_f64(&[1], &[3.0]).unwrap()];
        let mut state = opt.init_state(&p);
        for k in 1..=20 {
            let g = vec![Tensor::from_f64(&[1], &[2.0 * p[0].data()[0]]).unwrap()];
            opt.update(&mut state, &mut p, &g, 0.1).unwrap();
            let expect = 3.0 * 0.8f64.powi(k);
            assert!((p[0].data()[0] - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        for opt in [OptimizerConfig::adam(0.0), OptimizerConfig::sgd(0.0, 0.9)] {
            let p0 = vec![Tensor::<f64>::from_f64(&[3], &[1.5, -0.25, 1e-7]).unwrap()];
            let mut p = p0.clone();
            let mut state = opt.init_state(&p);
            let g = vec![Tensor::from_f64(&[3], &[0.3, -2.0, 5.0]).unwrap()];
            opt.update(&mut state, &mut p, &g, 0.0).unwrap();
            assert_eq!(p, p0);
        }
    }

    #[test]
    fn schedules() {
        let mut o = OptimizerConfig::adam(0.1);
        assert_eq!(o.lr_at(5, 10), 0.1);
        o.schedule = LrSchedule::Cosine;
        assert!((o.lr_at(5, 10) - 0.05).abs() < 1e-15);
        assert_eq!(o.lr_at(0, 10), 0.1);
        o.schedule = LrSchedule::Step;
        o.step_epochs = 2;
        assert!((o.lr_at(5, 10) - 0.1 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn csv_header_columns() {
        assert_eq!(
            MetricsRecord::csv_header(2),
            "epoch,loss_s1,loss_s2,total_loss,train_acc,test_acc,fevals,seconds"
        );
    }
}
