//! Piecewise-continuous classifier: `M` stages, each a discrete Volterra
//! filter followed by an ODE block (Volterra dynamics with time injection) and
//! a softmax head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, VjpFault};
use crate::error::{Error, Result};
use crate::ode::{self, BlockOptions, Dynamics, FevalCounter, GradMode, SolveStats, SolverConfig};
use crate::tensor::{ops, Element, Tensor};
use crate::volterra::{MultiScaleSpec, VolterraLayerSpec, VolterraMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Discrete filter applied at the stage's event point (one or more branches).
    pub filter: MultiScaleSpec,
    /// Channel- and extent-preserving layer defining the stage dynamics.
    pub dynamics: VolterraLayerSpec,
    /// Solver settings; the interval is taken from the model's event points.
    pub solver: SolverConfig,
    /// Feed `h + t` rather than `h` to the dynamics.
    pub time_injection: bool,
    /// Global-average-pool the state before the head (otherwise flatten it).
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VnodeModelConfig {
    /// `[C, H, W]` of one input sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// `t_0 = 0 < t_1 < ... < t_M = 1`.
    pub event_points: Vec<f64>,
    pub stages: Vec<StageSpec>,
}

/// Parameter family of a tensor: discrete filters, dynamics, or heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Filter,
    Dynamics,
    Head,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Dynamics, Family::Filter, Family::Head];

    pub fn label(self) -> &'static str {
        match self {
            Family::Dynamics => "theta (dynamics)",
            Family::Filter => "V (discrete filters)",
            Family::Head => "W (heads)",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub stage: usize,
    pub family: Family,
}

/// Per-sample parameter and FLOP breakdown of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCounts {
    pub filter_params: u64,
    pub dynamics_params: u64,
    pub head_params: u64,
    pub filter_flops: u64,
    pub dynamics_flops_per_eval: u64,
    /// Derivative evaluations per solve, when the solver is fixed-step.
    pub evals: Option<u64>,
    pub head_flops: u64,
}

impl StageCounts {
    pub fn params(&self) -> u64 {
        self.filter_params + self.dynamics_params + self.head_params
    }

    pub fn dynamics_flops(&self) -> Option<u64> {
        self.evals.map(|e| e * self.dynamics_flops_per_eval)
    }

    pub fn flops(&self) -> Option<u64> {
        self.dynamics_flops().map(|d| self.filter_flops + d + self.head_flops)
    }
}

pub fn uniform_event_points(m: usize) -> Vec<f64> {
    (0..=m).map(|i| i as f64 / m as f64).collect()
}

impl VnodeModelConfig {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.stage_shapes().map(|_| ())
    }

    /// Validates the architecture and returns each stage's state shape `[C, H, W]`.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let m = self.stages.len();
        if m == 0 {
            return Err(Error::config("model needs at least one stage"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model needs at least two classes"));
        }
        let t = &self.event_points;
        if t.len() != m + 1 || t[0] != 0.0 || t[m] != 1.0 || t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config(format!(
                "event points must rise strictly from 0 to 1 with {} entries, got {t:?}",
                m + 1
            )));
        }
        let mut shape = self.input_shape;
        let mut out = Vec::with_capacity(m);
        for (i, stage) in self.stages.iter().enumerate() {
            let ctx = |e: Error| Error::config(format!("stage {}: {e}", i + 1));
            let s = stage
                .filter
                .output_shape(&[1, shape[0], shape[1], shape[2]])
                .map_err(ctx)?;
            shape = [s[1], s[2], s[3]];
            let d = &stage.dynamics;
            d.validate().map_err(ctx)?;
            let ds = d.output_shape(&[1, shape[0], shape[1], shape[2]]).map_err(ctx)?;
            if ds[1..] != shape[..] {
                return Err(Error::config(format!(
                    "stage {}: dynamics maps {shape:?} to {:?}; it must preserve the state shape",
                    i + 1,
                    &ds[1..]
                )));
            }
            stage
                .solver
                .clone()
                .with_interval(t[i], t[i + 1])
                .validate()
                .map_err(ctx)?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn solver(&self, stage: usize) -> SolverConfig {
        let t = &self.event_points;
        self.stages[stage].solver.clone().with_interval(t[stage], t[stage + 1])
    }

    fn head_features(&self, stage: usize, shape: [usize; 3]) -> usize {
        if self.stages[stage].pool {
            shape[0]
        } else {
            shape.iter().product()
        }
    }

    /// Parameter inventory in canonical order: per stage, filter branches,
    /// dynamics, then head weight `[classes, features]` and bias.
    pub fn param_infos(&self) -> Result<Vec<ParamInfo>> {
        let shapes = self.stage_shapes()?;
        let mut out = Vec::new();
        for (m, stage) in self.stages.iter().enumerate() {
            let n = m + 1;
            for (b, branch) in stage.filter.branches.iter().enumerate() {
                for (name, shape) in branch.param_shapes() {
                    out.push(ParamInfo {
                        name: format!("stage{n}.filter{b}.{name}"),
                        shape,
                        stage: m,
                        family: Family::Filter,
                    });
                }
            }
            for (name, shape) in stage.dynamics.param_shapes() {
                out.push(ParamInfo {
                    name: format!("stage{n}.dynamics.{name}"),
                    shape,
                    stage: m,
                    family: Family::Dynamics,
                });
            }
            let feat = self.head_features(m, shapes[m]);
            out.push(ParamInfo {
                name: format!("stage{n}.head.weight"),
                shape: vec![self.num_classes, feat],
                stage: m,
                family: Family::Head,
            });
            out.push(ParamInfo {
                name: format!("stage{n}.head.bias"),
                shape: vec![self.num_classes],
                stage: m,
                family: Family::Head,
            });
        }
        Ok(out)
    }

    pub fn stage_counts(&self) -> Result<Vec<StageCounts>> {
        let shapes = self.stage_shapes()?;
        let mut prev = self.input_shape;
        let mut out = Vec::with_capacity(shapes.len());
        for (m, (stage, &shape)) in self.stages.iter().zip(&shapes).enumerate() {
            let feat = self.head_features(m, shape) as u64;
            let classes = self.num_classes as u64;
            out.push(StageCounts {
                filter_params: stage.filter.count_params(),
                dynamics_params: stage.dynamics.count_params(),
                head_params: feat * classes + classes,
                filter_flops: stage.filter.count_flops((prev[1], prev[2]))?,
                dynamics_flops_per_eval: stage.dynamics.count_flops((shape[1], shape[2]))?,
                evals: stage.solver.fixed_evals(),
                head_flops: 2 * feat * classes,
            });
            prev = shape;
        }
        Ok(out)
    }

    pub fn count_params(&self) -> Result<u64> {
        Ok(self.stage_counts()?.iter().map(StageCounts::params).sum())
    }

    /// Per-sample forward FLOPs. Fails for adaptive solvers, whose cost depends on the input.
    pub fn count_flops(&self) -> Result<u64> {
        self.stage_counts()?
            .iter()
            .map(|c| {
                c.flops()
                    .ok_or_else(|| Error::config("FLOPs of an adaptive solve are not known in advance"))
            })
            .sum()
    }

    /// Same architecture with every second-order term removed.
    pub fn linear_ablation(&self) -> Self {
        let mut out = self.clone();
        let strip = |l: &mut VolterraLayerSpec| {
            l.mode = VolterraMode::LowRank;
            l.rank = 0;
        };
        for s in &mut out.stages {
            s.filter.branches.iter_mut().for_each(strip);
            strip(&mut s.dynamics);
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize architecture: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("bad architecture: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `h + t` elementwise.
pub fn time_inject<T: Element>(h: &Tensor<T>, t: T) -> Tensor<T> {
    ops::add_scalar(h, t)
}

/// Stage dynamics `g(h, t) = V(h + t)` (or `V(h)` without time injection).
pub struct StageDynamics {
    pub layer: VolterraLayerSpec,
    pub time_injection: bool,
}

impl<T: Element> Dynamics<T> for StageDynamics {
    fn record(&self, tape: &mut Tape<T>, h: Var, t: T, params: &[Var]) -> Result<Var> {
        let z = if self.time_injection { tape.add_scalar(h, t) } else { h };
        self.layer.forward(tape, z, params)
    }
}

/// How a forward pass on a tape should treat its ODE blocks.
#[derive(Clone, Default)]
pub struct ForwardOptions {
    pub mode: GradMode,
    pub backward_fevals: Option<FevalCounter>,
    pub fault: VjpFault,
}

pub struct TapeForward {
    /// Per-stage class probabilities `[N, classes]`.
    pub probs: Vec<Var>,
    /// Per-stage states after the ODE block.
    pub states: Vec<Var>,
    pub stats: SolveStats,
}

#[derive(Clone, Debug)]
pub struct VnodeModel<T: Element> {
    pub config: VnodeModelConfig,
    pub params: Vec<Tensor<T>>,
    infos: Vec<ParamInfo>,
}

/// Predictions of every stage plus the final decision.
#[derive(Clone, Debug)]
pub struct Prediction<T: Element> {
    pub stage_probs: Vec<Tensor<T>>,
    /// Argmax of the last stage's probabilities per sample.
    pub classes: Vec<usize>,
    pub stats: SolveStats,
}

impl<T: Element> VnodeModel<T> {
    pub fn new(config: VnodeModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let infos = config.param_infos()?;
        if infos.len() != params.len() {
            return Err(Error::shape(format!(
                "model expects {} parameter tensors, got {}",
                infos.len(),
                params.len()
            )));
        }
        for (info, p) in infos.iter().zip(&params) {
            if p.shape() != info.shape.as_slice() {
                return Err(Error::shape(format!(
                    "{}: expected {:?}, got {:?}",
                    info.name,
                    info.shape,
                    p.shape()
                )));
            }
        }
        Ok(Self { config, params, infos })
    }

    pub fn init<R: Rng + ?Sized>(config: VnodeModelConfig, rng: &mut R) -> Result<Self> {
        let infos = config.param_infos()?;
        let mut params = Vec::with_capacity(infos.len());
        for stage in &config.stages {
            for b in &stage.filter.branches {
                params.extend(b.init_params::<T, R>(rng));
            }
            params.extend(stage.dynamics.init_params::<T, R>(rng));
            let w_shape = &infos[params.len()].shape;
            let bound = 1.0 / (w_shape[1] as f64).sqrt();
            let n: usize = w_shape.iter().product();
            let w = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect::<Vec<_>>();
            params.push(Tensor::from_f64(w_shape, &w)?);
            params.push(Tensor::zeros(&[config.num_classes]));
        }
        Self::new(config, params)
    }

    pub fn param_infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> VnodeModel<U> {
        VnodeModel {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            infos: self.infos.clone(),
        }
    }

    /// Zeroes every second-order parameter (the architecture keeps its factors).
    pub fn zero_quadratic(&mut self) {
        for (info, p) in self.infos.iter().zip(self.params.iter_mut()) {
            let field = info.name.rsplit('.').next().unwrap_or("");
            if !matches!(field, "w1" | "bias") && info.family != Family::Head {
                *p = Tensor::zeros(p.shape());
            }
        }
    }

    fn stage_ranges(&self) -> Vec<[std::ops::Range<usize>; 3]> {
        let mut out = Vec::new();
        let mut i = 0;
        for m in 0..self.config.num_stages() {
            let count = |fam: Family, from: usize| {
                self.infos[from..]
                    .iter()
                    .take_while(|p| p.stage == m && p.family == fam)
                    .count()
            };
            let f = count(Family::Filter, i);
            let d = count(Family::Dynamics, i + f);
            out.push([i..i + f, i + f..i + f + d, i + f + d..i + f + d + 2]);
            i += f + d + 2;
        }
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.input_shape[..] {
            return Err(Error::shape(format!(
                "model expects [N,{},{},{}], got {s:?}",
                self.config.input_shape[0], self.config.input_shape[1], self.config.input_shape[2]
            )));
        }
        Ok(())
    }

    /// Records the whole forward on `tape`; `params` mirror [`Self::param_infos`].
    pub fn record(&self, tape: &mut Tape<T>, x: Var, params: &[Var], opts: &ForwardOptions) -> Result<TapeForward> {
        self.check_input(tape.value(x))?;
        let mut probs = Vec::new();
        let mut states = Vec::new();
        let mut stats = SolveStats::default();
        let mut h = x;
        for (m, [fr, dr, hr]) in self.stage_ranges().into_iter().enumerate() {
            let (state, p, s) = self.record_stage(tape, m, h, &params[fr], &params[dr], &params[hr], opts)?;
            stats += s;
            probs.push(p);
            states.push(state);
            h = state;
        }
        Ok(TapeForward { probs, states, stats })
    }

    #[allow(clippy::too_many_arguments)]
    fn record_stage(
        &self,
        tape: &mut Tape<T>,
        m: usize,
        x: Var,
        filter: &[Var],
        dynamics: &[Var],
        head: &[Var],
        opts: &ForwardOptions,
    ) -> Result<(Var, Var, SolveStats)> {
        let stage = &self.config.stages[m];
        let s = stage.filter.forward(tape, x, filter)?;
        let dynamics_fn: Arc<dyn Dynamics<T>> = Arc::new(StageDynamics {
            layer: stage.dynamics.clone(),
            time_injection: stage.time_injection,
        });
        let block = BlockOptions {
            mode: opts.mode,
            backward_fevals: opts.backward_fevals.clone(),
            fault: opts.fault,
        };
        let (state, stats) = ode::ode_block(tape, s, dynamics, dynamics_fn, &self.config.solver(m), &block)
            .map_err(|e| stage_error(m, e))?;
        let feat = if stage.pool {
            tape.global_avgpool2d(state)?
        } else {
            tape.flatten(state)?
        };
        let logits = tape.linear(feat, head[0], head[1])?;
        let probs = tape.softmax(logits, 1)?;
        Ok((state, probs, stats))
    }

    /// Runs stage `m` on `x_prev` without recording gradients.
    pub fn stage_forward(&self, m: usize, x_prev: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let [fr, dr, hr] = self
            .stage_ranges()
            .into_iter()
            .nth(m)
            .ok_or_else(|| Error::contract(format!("no stage {m}")))?;
        let mut tape = Tape::new();
        let x = tape.constant(x_prev.clone());
        let mut consts = |r: std::ops::Range<usize>| -> Vec<Var> {
            self.params[r].iter().map(|p| tape.constant(p.clone())).collect()
        };
        let (f, d, h) = (consts(fr), consts(dr), consts(hr));
        let (state, probs, _) = self.record_stage(&mut tape, m, x, &f, &d, &h, &ForwardOptions::default())?;
        Ok((tape.value(state).clone(), tape.value(probs).clone()))
    }

    /// Inference forward: all stage predictions and the final argmax.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ps: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = self.record(&mut tape, xv, &ps, &ForwardOptions::default())?;
        let stage_probs: Vec<Tensor<T>> = out.probs.iter().map(|&p| tape.value(p).clone()).collect();
        let classes = argmax_rows(stage_probs.last().expect("at least one stage"));
        Ok(Prediction {
            stage_probs,
            classes,
            stats: out.stats,
        })
    }
}

fn stage_error(m: usize, e: Error) -> Error {
    match e {
        Error::Divergence { context, detail } => Error::Divergence {
            context: format!("stage {} ({context})", m + 1),
            detail,
        },
        other => other,
    }
}

/// Index of the largest entry of each row of a `[N, C]` tensor (first on ties).
pub fn argmax_rows<T: Element>(x: &Tensor<T>) -> Vec<usize> {
    let c = x.shape()[1];
    x.data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
