//! Initial-value-problem solvers and their gradients.
//!
//! Dynamics are black boxes described by how they record themselves on an
//! autodiff [`Tape`]; evaluation and vector–Jacobian products are derived from
//! that recording. Gradients of a solve come either from the adjoint method
//! (augmented state integrated backward in time, no stored trajectory) or from
//! reverse mode through the unrolled fixed-step solve.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var, VjpFault};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
    Dopri5,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    #[default]
    Adjoint,
    Unrolled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// Step count for fixed-step methods.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Attempted-step budget for dopri5.
    pub max_steps: usize,
    /// First dopri5 step; chosen automatically when absent.
    pub initial_step: Option<f64>,
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps: 8,
            rtol: 1e-6,
            atol: 1e-8,
            max_steps: 10_000,
            initial_step: None,
            t_start: 0.0,
            t_end: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn fixed(method: Method, steps: usize, t_start: f64, t_end: f64) -> Self {
        Self {
            method,
            steps,
            t_start,
            t_end,
            ..Self::default()
        }
    }

    pub fn adaptive(rtol: f64, atol: f64, t_start: f64, t_end: f64) -> Self {
        Self {
            method: Method::Dopri5,
            rtol,
            atol,
            t_start,
            t_end,
            ..Self::default()
        }
    }

    pub fn with_interval(mut self, t_start: f64, t_end: f64) -> Self {
        self.t_start = t_start;
        self.t_end = t_end;
        self
    }

    pub fn is_fixed_step(&self) -> bool {
        self.method != Method::Dopri5
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_start.is_finite() && self.t_end.is_finite() && self.t_start < self.t_end) {
            return Err(Error::config(format!(
                "solver interval must satisfy t_start < t_end, got [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        match self.method {
            Method::Euler | Method::Rk4 if self.steps == 0 => {
                Err(Error::config("fixed-step solver needs at least one step"))
            }
            Method::Dopri5 if !(self.rtol > 0.0 && self.atol > 0.0) => {
                Err(Error::config("dopri5 tolerances must be positive"))
            }
            Method::Dopri5 if self.max_steps == 0 => Err(Error::config("dopri5 needs max_steps >= 1")),
            Method::Dopri5 if self.initial_step.is_some_and(|h| !(h > 0.0)) => {
                Err(Error::config("dopri5 initial_step must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Derivative evaluations of one fixed-step solve; `None` for adaptive solves.
    pub fn fixed_evals(&self) -> Option<u64> {
        match self.method {
            Method::Euler => Some(self.steps as u64),
            Method::Rk4 => Some(4 * self.steps as u64),
            Method::Dopri5 => None,
        }
    }
}

/// Work done by one solve.
///
/// `fevals` is exact: Euler takes one evaluation per step and RK4 four. Dopri5
/// spends one evaluation at the start (plus one more when it picks its own
/// initial step) and six per attempted step; the seventh stage of an accepted
/// step is reused as the first stage of the next.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub fevals: u64,
    pub accepted: u64,
    pub rejected: u64,
}

impl std::ops::AddAssign for SolveStats {
    fn add_assign(&mut self, o: Self) {
        self.fevals += o.fevals;
        self.accepted += o.accepted;
        self.rejected += o.rejected;
    }
}

/// Vector field `dh/dt = g(h, t; params)`.
pub trait Dynamics<T: Element>: Send + Sync {
    /// Records one evaluation on `tape`. The result must have `h`'s shape.
    fn record(&self, tape: &mut Tape<T>, h: Var, t: T, params: &[Var]) -> Result<Var>;

    fn eval(&self, h: &Tensor<T>, t: T, params: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let ps: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = self.record(&mut tape, hv, t, &ps)?;
        check_state_shape(h, tape.value(out))?;
        Ok(tape.value(out).clone())
    }

    /// Returns `(g, a^T dg/dh, a^T dg/dparams)` at `(h, t)`.
    fn vjp(&self, h: &Tensor<T>, t: T, params: &[Tensor<T>], a: &Tensor<T>) -> Result<DynamicsVjp<T>> {
        vjp_with_fault(self, h, t, params, a, VjpFault::None)
    }
}

pub struct DynamicsVjp<T: Element> {
    pub value: Tensor<T>,
    pub grad_h: Tensor<T>,
    pub grad_params: Vec<Tensor<T>>,
}

fn vjp_with_fault<T: Element, D: Dynamics<T> + ?Sized>(
    dynamics: &D,
    h: &Tensor<T>,
    t: T,
    params: &[Tensor<T>],
    a: &Tensor<T>,
    fault: VjpFault,
) -> Result<DynamicsVjp<T>> {
    let mut tape = Tape::new();
    tape.set_fault(fault);
    let hv = tape.param(h.clone());
    let ps: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = dynamics.record(&mut tape, hv, t, &ps)?;
    check_state_shape(h, tape.value(out))?;
    let mut grads = tape.vjp(out, a.clone())?;
    Ok(DynamicsVjp {
        value: tape.value(out).clone(),
        grad_h: grads.take(hv).unwrap_or_else(|| Tensor::zeros(h.shape())),
        grad_params: ps
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect(),
    })
}

fn check_state_shape<T: Element>(h: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if h.shape() != g.shape() {
        return Err(Error::shape(format!(
            "dynamics output {:?} differs from state {:?}",
            g.shape(),
            h.shape()
        )));
    }
    Ok(())
}

/// Dynamics given by a closure, for tests and scalar problems.
pub struct FnDynamics<F>(pub F);

impl<T, F> Dynamics<T> for FnDynamics<F>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var, T, &[Var]) -> Result<Var> + Send + Sync,
{
    fn record(&self, tape: &mut Tape<T>, h: Var, t: T, params: &[Var]) -> Result<Var> {
        (self.0)(tape, h, t, params)
    }
}

type Field<'a, T> = dyn FnMut(f64, &[T]) -> Result<Vec<T>> + 'a;

fn combine<T: Element>(y: &[T], dt: f64, terms: &[(f64, &[T])]) -> Vec<T> {
    let mut out = y.to_vec();
    for &(c, k) in terms {
        if c == 0.0 {
            continue;
        }
        let s = T::lit(dt * c);
        for (o, &v) in out.iter_mut().zip(k) {
            *o = *o + s * v;
        }
    }
    out
}

fn checked<T: Element>(t: f64, v: Vec<T>) -> Result<Vec<T>> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(v),
        Some(i) => Err(Error::Divergence {
            context: format!("ODE evaluation at t={t}"),
            detail: format!("derivative component {i} is {}", v[i]),
        }),
    }
}

/// Integrates `y' = f(t, y)` from `cfg.t_start` to `cfg.t_end`.
fn integrate<T: Element>(y0: Vec<T>, cfg: &SolverConfig, f: &mut Field<'_, T>) -> Result<(Vec<T>, SolveStats)> {
    cfg.validate()?;
    let mut stats = SolveStats::default();
    let mut eval = |t: f64, y: &[T], stats: &mut SolveStats| -> Result<Vec<T>> {
        stats.fevals += 1;
        checked(t, f(t, y)?)
    };
    let (t0, t1) = (cfg.t_start, cfg.t_end);
    match cfg.method {
        Method::Euler | Method::Rk4 => {
            let n = cfg.steps;
            let dt = (t1 - t0) / n as f64;
            let mut y = y0;
            for i in 0..n {
                let t = t0 + i as f64 * dt;
                y = match cfg.method {
                    Method::Euler => {
                        let k = eval(t, &y, &mut stats)?;
                        combine(&y, dt, &[(1.0, &k)])
                    }
                    _ => {
                        let k1 = eval(t, &y, &mut stats)?;
                        let k2 = eval(t + dt / 2.0, &combine(&y, dt, &[(0.5, &k1)]), &mut stats)?;
                        let k3 = eval(t + dt / 2.0, &combine(&y, dt, &[(0.5, &k2)]), &mut stats)?;
                        let k4 = eval(t + dt, &combine(&y, dt, &[(1.0, &k3)]), &mut stats)?;
                        combine(
                            &y,
                            dt,
                            &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)],
                        )
                    }
                };
                stats.accepted += 1;
            }
            Ok((y, stats))
        }
        Method::Dopri5 => dopri5(y0, cfg, &mut eval, stats),
    }
}

mod tableau {
    pub const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    pub const A: [&[f64]; 7] = [
        &[],
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
        &[
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    /// Fourth-order embedded weights.
    pub const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
}

fn rms_error<T: Element>(y: &[T], y_new: &[T], err: &[T], cfg: &SolverConfig) -> f64 {
    let n = y.len().max(1) as f64;
    let sum: f64 = y
        .iter()
        .zip(y_new)
        .zip(err)
        .map(|((&a, &b), &e)| {
            let scale = cfg.atol + cfg.rtol * a.to_f64_lossless().abs().max(b.to_f64_lossless().abs());
            (e.to_f64_lossless() / scale).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn dopri5<T: Element>(
    y0: Vec<T>,
    cfg: &SolverConfig,
    eval: &mut impl FnMut(f64, &[T], &mut SolveStats) -> Result<Vec<T>>,
    mut stats: SolveStats,
) -> Result<(Vec<T>, SolveStats)> {
    const SAFETY: f64 = 0.9;
    const MIN_FACTOR: f64 = 0.2;
    const MAX_FACTOR: f64 = 10.0;
    let (t0, t1) = (cfg.t_start, cfg.t_end);
    let mut t = t0;
    let mut y = y0;
    let mut k1 = eval(t, &y, &mut stats)?;
    let mut dt = match cfg.initial_step {
        Some(h) => h,
        None => initial_step(&y, &k1, cfg, eval, &mut stats)?,
    }
    .min(t1 - t0);
    let mut attempts = 0usize;
    let mut prev_rejected = false;
    while t < t1 {
        if attempts == cfg.max_steps {
            return Err(Error::Convergence(format!(
                "dopri5 exhausted {} steps at t={t} of [{t0}, {t1}]",
                cfg.max_steps
            )));
        }
        attempts += 1;
        let last = t + dt >= t1;
        if last {
            dt = t1 - t;
        }
        if dt <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::Convergence(format!(
                "dopri5 step size underflow ({dt:e}) at t={t}"
            )));
        }
        let mut ks: Vec<Vec<T>> = vec![k1.clone()];
        for s in 1..7 {
            let terms: Vec<(f64, &[T])> = tableau::A[s].iter().zip(&ks).map(|(&a, k)| (a, k.as_slice())).collect();
            let ys = combine(&y, dt, &terms);
            ks.push(eval(t + tableau::C[s] * dt, &ys, &mut stats)?);
        }
        let terms5: Vec<(f64, &[T])> = tableau::A[6].iter().zip(&ks).map(|(&a, k)| (a, k.as_slice())).collect();
        let y_new = combine(&y, dt, &terms5);
        let err_terms: Vec<(f64, &[T])> = tableau::A[6]
            .iter()
            .chain(std::iter::once(&0.0))
            .zip(tableau::B4)
            .zip(&ks)
            .map(|((&b5, b4), k)| (b5 - b4, k.as_slice()))
            .collect();
        let zeros = vec![T::zero(); y.len()];
        let err_vec = combine(&zeros, dt, &err_terms);
        let err = rms_error(&y, &y_new, &err_vec, cfg);
        if err <= 1.0 {
            t = if last { t1 } else { t + dt };
            y = y_new;
            k1 = ks.pop().expect("seven stages");
            stats.accepted += 1;
            let mut factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                SAFETY * err.powf(-0.2)
            };
            factor = factor.clamp(MIN_FACTOR, MAX_FACTOR);
            if prev_rejected {
                factor = factor.min(1.0);
            }
            dt *= factor;
            prev_rejected = false;
        } else {
            if !err.is_finite() {
                return Err(Error::Divergence {
                    context: format!("dopri5 step at t={t}"),
                    detail: "non-finite error estimate".into(),
                });
            }
            stats.rejected += 1;
            dt *= (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
            prev_rejected = true;
        }
    }
    Ok((y, stats))
}

/// Starting step heuristic of Hairer, Norsett & Wanner (one extra evaluation).
fn initial_step<T: Element>(
    y0: &[T],
    f0: &[T],
    cfg: &SolverConfig,
    eval: &mut impl FnMut(f64, &[T], &mut SolveStats) -> Result<Vec<T>>,
    stats: &mut SolveStats,
) -> Result<f64> {
    let scale: Vec<f64> = y0
        .iter()
        .map(|v| cfg.atol + cfg.rtol * v.to_f64_lossless().abs())
        .collect();
    let norm = |v: &[T]| -> f64 {
        let s: f64 = v
            .iter()
            .zip(&scale)
            .map(|(x, s)| (x.to_f64_lossless() / s).powi(2))
            .sum();
        (s / v.len().max(1) as f64).sqrt()
    };
    let (d0, d1) = (norm(y0), norm(f0));
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = combine(y0, h0, &[(1.0, f0)]);
    let f1 = eval(cfg.t_start + h0, &y1, stats)?;
    let diff: Vec<T> = f1.iter().zip(f0).map(|(&a, &b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1))
}

fn tensor_field<'a, T: Element, D: Dynamics<T> + ?Sized>(
    shape: &'a [usize],
    dynamics: &'a D,
    params: &'a [Tensor<T>],
) -> impl FnMut(f64, &[T]) -> Result<Vec<T>> + 'a {
    move |t, y| {
        let h = Tensor::new(shape, y.to_vec())?;
        Ok(dynamics.eval(&h, T::lit(t), params)?.into_vec())
    }
}

/// Solves `dh/dt = g(h, t)` from `h0` over the configured interval.
pub fn odesolve<T: Element, D: Dynamics<T> + ?Sized>(
    h0: &Tensor<T>,
    dynamics: &D,
    params: &[Tensor<T>],
    cfg: &SolverConfig,
) -> Result<(Tensor<T>, SolveStats)> {
    h0.ensure_finite("ODE initial state")?;
    let shape = h0.shape().to_vec();
    let mut field = tensor_field(&shape, dynamics, params);
    let (y, stats) = integrate(h0.data().to_vec(), cfg, &mut field)?;
    Ok((Tensor::new(&shape, y)?, stats))
}

/// Gradients of a scalar loss with respect to a solve's inputs.
#[derive(Clone, Debug)]
pub struct SolveGradients<T: Element> {
    pub grad_h0: Tensor<T>,
    pub grad_params: Vec<Tensor<T>>,
    pub stats: SolveStats,
}

/// Adjoint sensitivities: integrates `[h, a, g_params]` backward from `t_end`
/// with `da/dt = -a^T dg/dh` and `d g_params/dt = -a^T dg/dparams`, starting
/// from `a(t_end) = dL/dh(t_end)` and `g_params = 0`. The state `h` is
/// reconstructed backward alongside, so no trajectory is stored.
pub fn odesolve_adjoint_backward<T: Element, D: Dynamics<T> + ?Sized>(
    h_end: &Tensor<T>,
    dl_dh_end: &Tensor<T>,
    dynamics: &D,
    params: &[Tensor<T>],
    cfg: &SolverConfig,
) -> Result<SolveGradients<T>> {
    adjoint_impl(h_end, dl_dh_end, dynamics, params, cfg, VjpFault::None)
}

fn adjoint_impl<T: Element, D: Dynamics<T> + ?Sized>(
    h_end: &Tensor<T>,
    dl_dh_end: &Tensor<T>,
    dynamics: &D,
    params: &[Tensor<T>],
    cfg: &SolverConfig,
    fault: VjpFault,
) -> Result<SolveGradients<T>> {
    if h_end.shape() != dl_dh_end.shape() {
        return Err(Error::contract(format!(
            "adjoint seed {:?} does not match state {:?}",
            dl_dh_end.shape(),
            h_end.shape()
        )));
    }
    let n = h_end.len();
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let mut y0 = Vec::with_capacity(2 * n + sizes.iter().sum::<usize>());
    y0.extend_from_slice(h_end.data());
    y0.extend_from_slice(dl_dh_end.data());
    y0.resize(y0.capacity(), T::zero());

    // Reversed time s = t_end - t runs over [0, t_end - t_start].
    let t_end = cfg.t_end;
    let reversed = cfg.clone().with_interval(0.0, cfg.t_end - cfg.t_start);
    let shape = h_end.shape().to_vec();
    let mut field = |s: f64, y: &[T]| -> Result<Vec<T>> {
        let h = Tensor::new(&shape, y[..n].to_vec())?;
        let a = Tensor::new(&shape, y[n..2 * n].to_vec())?;
        let v = vjp_with_fault(dynamics, &h, T::lit(t_end - s), params, &a, fault)?;
        let mut out = Vec::with_capacity(y.len());
        out.extend(v.value.data().iter().map(|&g| -g));
        out.extend_from_slice(v.grad_h.data());
        for gp in &v.grad_params {
            out.extend_from_slice(gp.data());
        }
        Ok(out)
    };
    let (y, stats) = integrate(y0, &reversed, &mut field)?;
    let mut offset = 2 * n;
    let mut grad_params = Vec::with_capacity(params.len());
    for p in params {
        grad_params.push(Tensor::new(p.shape(), y[offset..offset + p.len()].to_vec())?);
        offset += p.len();
    }
    Ok(SolveGradients {
        grad_h0: Tensor::new(&shape, y[n..2 * n].to_vec())?,
        grad_params,
        stats,
    })
}

/// Records a fixed-step solve on `tape` so reverse mode can differentiate it.
pub fn record_solve<T: Element, D: Dynamics<T> + ?Sized>(
    tape: &mut Tape<T>,
    h0: Var,
    params: &[Var],
    dynamics: &D,
    cfg: &SolverConfig,
) -> Result<(Var, SolveStats)> {
    cfg.validate()?;
    if !cfg.is_fixed_step() {
        return Err(Error::config("unrolled differentiation needs a fixed-step solver"));
    }
    let n = cfg.steps;
    let dt = (cfg.t_end - cfg.t_start) / n as f64;
    let mut stats = SolveStats::default();
    let eval = |tape: &mut Tape<T>, h: Var, t: f64, stats: &mut SolveStats| -> Result<Var> {
        stats.fevals += 1;
        let g = dynamics.record(tape, h, T::lit(t), params)?;
        check_state_shape(tape.value(h), tape.value(g))?;
        tape.value(g).ensure_finite(&format!("ODE evaluation at t={t}"))?;
        Ok(g)
    };
    let mut h = h0;
    for i in 0..n {
        let t = cfg.t_start + i as f64 * dt;
        h = match cfg.method {
            Method::Euler => {
                let k = eval(tape, h, t, &mut stats)?;
                tape.axpy(h, T::lit(dt), k)?
            }
            _ => {
                let k1 = eval(tape, h, t, &mut stats)?;
                let y2 = tape.axpy(h, T::lit(dt * 0.5), k1)?;
                let k2 = eval(tape, y2, t + dt / 2.0, &mut stats)?;
                let y3 = tape.axpy(h, T::lit(dt * 0.5), k2)?;
                let k3 = eval(tape, y3, t + dt / 2.0, &mut stats)?;
                let y4 = tape.axpy(h, T::lit(dt), k3)?;
                let k4 = eval(tape, y4, t + dt, &mut stats)?;
                let s = tape.axpy(h, T::lit(dt / 6.0), k1)?;
                let s = tape.axpy(s, T::lit(dt / 3.0), k2)?;
                let s = tape.axpy(s, T::lit(dt / 3.0), k3)?;
                tape.axpy(s, T::lit(dt / 6.0), k4)?
            }
        };
        stats.accepted += 1;
    }
    Ok((h, stats))
}

/// Reverse mode through the unrolled fixed-step solve; same contract as the adjoint.
pub fn odesolve_discrete_backprop<T: Element, D: Dynamics<T> + ?Sized>(
    h0: &Tensor<T>,
    dl_dh_end: &Tensor<T>,
    dynamics: &D,
    params: &[Tensor<T>],
    cfg: &SolverConfig,
) -> Result<SolveGradients<T>> {
    let mut tape = Tape::new();
    let hv = tape.param(h0.clone());
    let ps: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let (out, stats) = record_solve(&mut tape, hv, &ps, dynamics, cfg)?;
    if tape.value(out).shape() != dl_dh_end.shape() {
        return Err(Error::contract("seed shape does not match the state"));
    }
    let mut grads = tape.vjp(out, dl_dh_end.clone())?;
    Ok(SolveGradients {
        grad_h0: grads.take(hv).unwrap_or_else(|| Tensor::zeros(h0.shape())),
        grad_params: ps
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect(),
        stats,
    })
}

/// Shared counter of derivative evaluations spent in backward passes.
pub type FevalCounter = Arc<AtomicU64>;

struct OdeBlockOp<T: Element> {
    dynamics: Arc<dyn Dynamics<T>>,
    cfg: SolverConfig,
    backward_fevals: Option<FevalCounter>,
    fault: VjpFault,
}

impl<T: Element> CustomOp<T> for OdeBlockOp<T> {
    fn name(&self) -> &str {
        "ode_block_adjoint"
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let params: Vec<Tensor<T>> = inputs[1..].iter().map(|&p| p.clone()).collect();
        let g = adjoint_impl(output, grad, self.dynamics.as_ref(), &params, &self.cfg, self.fault)?;
        if let Some(c) = &self.backward_fevals {
            c.fetch_add(g.stats.fevals, Ordering::Relaxed);
        }
        let mut out = vec![Some(g.grad_h0)];
        out.extend(g.grad_params.into_iter().map(Some));
        Ok(out)
    }
}

/// Options for [`ode_block`].
#[derive(Clone, Default)]
pub struct BlockOptions {
    pub mode: GradMode,
    pub backward_fevals: Option<FevalCounter>,
    pub fault: VjpFault,
}

/// Places an ODE solve on `tape`. In adjoint mode only the final state is
/// stored and gradients come from [`odesolve_adjoint_backward`]; in unrolled
/// mode every solver stage is recorded.
pub fn ode_block<T: Element>(
    tape: &mut Tape<T>,
    h0: Var,
    params: &[Var],
    dynamics: Arc<dyn Dynamics<T>>,
    cfg: &SolverConfig,
    opts: &BlockOptions,
) -> Result<(Var, SolveStats)> {
    match opts.mode {
        GradMode::Unrolled => record_solve(tape, h0, params, dynamics.as_ref(), cfg),
        GradMode::Adjoint => {
            let values: Vec<Tensor<T>> = params.iter().map(|&p| tape.value(p).clone()).collect();
            let (h_end, stats) = odesolve(tape.value(h0), dynamics.as_ref(), &values, cfg)?;
            let op = Arc::new(OdeBlockOp {
                dynamics,
                cfg: cfg.clone(),
                backward_fevals: opts.backward_fevals.clone(),
                fault: opts.fault,
            });
            let mut inputs = vec![h0];
            inputs.extend_from_slice(params);
            Ok((tape.custom(&inputs, h_end, op), stats))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exponential() -> FnDynamics<impl Fn(&mut Tape<f64>, Var, f64, &[Var]) -> Result<Var> + Send + Sync> {
        FnDynamics(|_: &mut Tape<f64>, h: Var, _t: f64, _p: &[Var]| Ok(h))
    }

    fn scaled() -> FnDynamics<impl Fn(&mut Tape<f64>, Var, f64, &[Var]) -> Result<Var> + Send + Sync> {
        FnDynamics(|tape: &mut Tape<f64>, h: Var, _t: f64, p: &[Var]| tape.mul(h, p[0]))
    }

    fn one() -> Tensor<f64> {
        Tensor::from_f64(&[1], &[1.0]).unwrap()
    }

    #[test]
    fn zero_dynamics_is_constant() {
        let zero = FnDynamics(|tape: &mut Tape<f64>, h: Var, _t: f64, _p: &[Var]| Ok(tape.mul_scalar(h, 0.0)));
        let h0 = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        for cfg in [
            SolverConfig::fixed(Method::Rk4, 4, 0.0, 1.0),
            SolverConfig::adaptive(1e-6, 1e-9, 0.0, 1.0),
        ] {
            assert_eq!(odesolve(&h0, &zero, &[], &cfg).unwrap().0, h0);
        }
        let g =
            odesolve_discrete_backprop(&h0, &h0, &zero, &[], &SolverConfig::fixed(Method::Euler, 3, 0.0, 1.0)).unwrap();
        assert_eq!(g.grad_h0, h0);
    }

    #[test]
    fn exponential_growth() {
        let cfg = SolverConfig::adaptive(1e-6, 1e-9, 0.0, 1.0);
        let (y, stats) = odesolve(&one(), &exponential(), &[], &cfg).unwrap();
        assert!((y.data()[0] - std::f64::consts::E).abs() <= 1e-5 * std::f64::consts::E);
        assert_eq!(stats.fevals, 2 + 6 * (stats.accepted + stats.rejected));
    }

    #[test]
    fn fixed_step_eval_counts() {
        let (_, s) = odesolve(
            &one(),
            &exponential(),
            &[],
            &SolverConfig::fixed(Method::Euler, 5, 0.0, 1.0),
        )
        .unwrap();
        assert_eq!(s.fevals, 5);
        let (_, s) = odesolve(
            &one(),
            &exponential(),
            &[],
            &SolverConfig::fixed(Method::Rk4, 5, 0.0, 1.0),
        )
        .unwrap();
        assert_eq!(s.fevals, 20);
    }

    #[test]
    fn single_euler_step_is_residual_update() {
        let g = FnDynamics(|tape: &mut Tape<f64>, h: Var, t: f64, _p: &[Var]| {
            let sq = tape.mul(h, h)?;
            Ok(tape.add_scalar(sq, t + 0.25))
        });
        let h0 = Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap();
        let (y, _) = odesolve(&h0, &g, &[], &SolverConfig::fixed(Method::Euler, 1, 0.0, 1.0)).unwrap();
        assert_eq!(y.data(), &[0.5 + 0.5, -1.5 + 2.5]);
    }

    #[test]
    fn adjoint_matches_analytic_sensitivity() {
        let lambda = Tensor::from_f64(&[1], &[0.5]).unwrap();
        let cfg = SolverConfig::adaptive(1e-10, 1e-12, 0.0, 1.0);
        let (h1, _) = odesolve(&one(), &scaled(), std::slice::from_ref(&lambda), &cfg).unwrap();
        let g = odesolve_adjoint_backward(&h1, &one(), &scaled(), &[lambda], &cfg).unwrap();
        let exact = 0.5f64.exp();
        assert!((g.grad_params[0].data()[0] - exact).abs() / exact < 1e-5);
        assert!((g.grad_h0.data()[0] - exact).abs() / exact < 1e-5);
    }

    #[test]
    fn parameter_free_dynamics_gives_zero_sensitivity() {
        let unused = Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let cfg = SolverConfig::fixed(Method::Rk4, 4, 0.0, 1.0);
        let (h1, _) = odesolve(&one(), &exponential(), std::slice::from_ref(&unused), &cfg).unwrap();
        let g = odesolve_adjoint_backward(&h1, &one(), &exponential(), &[unused], &cfg).unwrap();
        assert_eq!(g.grad_params[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn divergence_is_reported() {
        let blowup = FnDynamics(|tape: &mut Tape<f64>, h: Var, _t: f64, _p: &[Var]| {
            let sq = tape.mul(h, h)?;
            Ok(tape.mul_scalar(sq, 1e300))
        });
        let err = odesolve(&one(), &blowup, &[], &SolverConfig::fixed(Method::Euler, 4, 0.0, 1.0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn step_budget_exhaustion() {
        let mut cfg = SolverConfig::adaptive(1e-12, 1e-12, 0.0, 1.0);
        cfg.max_steps = 3;
        let err = odesolve(&one(), &exponential(), &[], &cfg).unwrap_err();
        assert!(matches!(err, Error::Convergence(_)));
    }

    #[test]
    fn invalid_configs() {
        assert!(SolverConfig::fixed(Method::Rk4, 0, 0.0, 1.0).validate().is_err());
        assert!(SolverConfig::fixed(Method::Rk4, 2, 1.0, 1.0).validate().is_err());
        assert!(SolverConfig::adaptive(0.0, 1e-6, 0.0, 1.0).validate().is_err());
        let err = odesolve_discrete_backprop(
            &one(),
            &one(),
            &exponential(),
            &[],
            &SolverConfig::adaptive(1e-6, 1e-6, 0.0, 1.0),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn adjoint_seed_shape_mismatch() {
        let cfg = SolverConfig::fixed(Method::Rk4, 2, 0.0, 1.0);
        let seed = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
        let err = odesolve_adjoint_backward(&one(), &seed, &exponential(), &[], &cfg).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
