//! Model-scope gradient verification: adjoint gradients against central
//! finite differences and against reverse mode through the unrolled solve.

use std::time::Instant;

use crate::autodiff::VjpFault;
use crate::error::{Error, Result};
use crate::model::{Family, ForwardOptions, VnodeModel};
use crate::ode::GradMode;
use crate::tensor::Tensor;
use crate::trainer::{batch_loss, loss_and_gradients};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference half step.
    pub epsilon: f64,
    pub threshold: f64,
    pub fault: VjpFault,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            threshold: 1e-4,
            fault: VjpFault::None,
        }
    }
}

/// Running comparison of a gradient against a reference.
///
/// The relative error of a family is `max_k |a_k - b_k| / max_k |b_k|`: the
/// worst deviation measured against the family's gradient scale. The largest
/// elementwise ratio `|a_k - b_k| / max(|a_k|, |b_k|)` is kept for reporting;
/// it is dominated by near-zero entries.
#[derive(Clone, Debug, Default)]
pub struct Deviation {
    pub max_abs_error: f64,
    pub max_abs_reference: f64,
    pub max_elementwise: f64,
    /// Entry where `max_abs_error` occurs.
    pub worst: String,
}

impl Deviation {
    pub fn push(&mut self, value: f64, reference: f64, label: impl FnOnce() -> String) {
        let err = (value - reference).abs();
        if !(err <= self.max_abs_error) {
            self.max_abs_error = err;
            self.worst = label();
        }
        self.max_abs_reference = self.max_abs_reference.max(reference.abs());
        let denom = value.abs().max(reference.abs());
        if denom > 0.0 {
            self.max_elementwise = self.max_elementwise.max(err / denom);
        } else if err > 0.0 || err.is_nan() {
            self.max_elementwise = f64::INFINITY;
        }
    }

    pub fn relative(&self) -> f64 {
        if self.max_abs_error == 0.0 {
            0.0
        } else if self.max_abs_reference > 0.0 {
            self.max_abs_error / self.max_abs_reference
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Debug)]
pub struct FamilyReport {
    pub family: Family,
    pub scalars: usize,
    /// Adjoint against central finite differences.
    pub fd: Deviation,
    /// Adjoint against the unrolled solve (fixed-step solvers only).
    pub unrolled: Option<Deviation>,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub families: Vec<FamilyReport>,
    pub threshold: f64,
    pub seconds: f64,
    pub loss: f64,
}

impl GradcheckReport {
    /// Families whose adjoint gradient misses the finite-difference threshold.
    pub fn failing(&self) -> Vec<Family> {
        self.families
            .iter()
            .filter(|f| !(f.fd.relative() < self.threshold))
            .map(|f| f.family)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }

    pub fn max_fd(&self) -> f64 {
        self.families.iter().map(|f| f.fd.relative()).fold(0.0, f64::max)
    }

    pub fn max_unrolled(&self) -> Option<f64> {
        let devs: Option<Vec<f64>> = self
            .families
            .iter()
            .map(|f| f.unrolled.as_ref().map(Deviation::relative))
            .collect();
        devs.map(|d| d.into_iter().fold(0.0, f64::max))
    }
}

/// Checks every scalar parameter of a 64-bit model on one batch.
pub fn gradcheck(
    model: &VnodeModel<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    weights: &[f64],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::config("gradcheck epsilon must be positive"));
    }
    let started = Instant::now();
    let adjoint = loss_and_gradients(
        model,
        x,
        labels,
        weights,
        &ForwardOptions {
            mode: GradMode::Adjoint,
            fault: opts.fault,
            ..ForwardOptions::default()
        },
    )?;
    let fixed = model.config.stages.iter().all(|s| s.solver.is_fixed_step());
    let unrolled = if fixed {
        Some(loss_and_gradients(
            model,
            x,
            labels,
            weights,
            &ForwardOptions {
                mode: GradMode::Unrolled,
                ..ForwardOptions::default()
            },
        )?)
    } else {
        None
    };

    let mut families: Vec<FamilyReport> = Family::ALL
        .iter()
        .map(|&family| FamilyReport {
            family,
            scalars: 0,
            fd: Deviation::default(),
            unrolled: unrolled.as_ref().map(|_| Deviation::default()),
        })
        .collect();
    let mut probe = model.clone();
    for (i, info) in model.param_infos().iter().enumerate() {
        let fam = families
            .iter_mut()
            .find(|f| f.family == info.family)
            .expect("every family listed");
        for k in 0..model.params[i].len() {
            let orig = model.params[i].data()[k];
            probe.params[i].data_mut()[k] = orig + opts.epsilon;
            let (_, up) = batch_loss(&probe, x, labels, weights)?;
            probe.params[i].data_mut()[k] = orig - opts.epsilon;
            let (_, down) = batch_loss(&probe, x, labels, weights)?;
            probe.params[i].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * opts.epsilon);
            let g = adjoint.grads[i].data()[k];
            let label = || format!("{}[{k}]", info.name);
            fam.scalars += 1;
            fam.fd.push(g, fd, label);
            if let (Some(u), Some(dev)) = (&unrolled, fam.unrolled.as_mut()) {
                dev.push(g, u.grads[i].data()[k], label);
            }
        }
    }
    Ok(GradcheckReport {
        families,
        threshold: opts.threshold,
        seconds: started.elapsed().as_secs_f64(),
        loss: adjoint.total,
    })
}

/// Reproducible batch of inputs uniform in `[-1, 1]` with uniform random labels.
pub fn synthetic_batch(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.iter().product::<usize>();
    let data = (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (Tensor::from_parts(vec![n, shape[0], shape[1], shape[2]], data), labels)
}
