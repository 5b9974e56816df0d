//! Discrete second-order 2-D Volterra filters.
//!
//! A second-order filter maps an input `x` to
//!
//! ```text
//! y[m,n] = b + sum_k W1[k] x[m-k]  +  sum_{k,l} W2[k,l] x[m-k] x[m-l]
//! ```
//!
//! (cross-correlation orientation, channels summed within a group). Two
//! realizations are provided:
//!
//! * **naive-full** stores the whole quadratic kernel `W2` and evaluates the
//!   double sum directly. Its memory grows with the square of the receptive
//!   field, so it is meant for small shapes and as a reference.
//! * **low-rank** factors the quadratic kernel as `W2 = sum_q A_q (x) B_q`,
//!   turning the quadratic term into `sum_q (x * A_q) . (x * B_q)`, a sum of
//!   Hadamard products of ordinary convolutions.
//!
//! Higher polynomial order comes from cascading second-order layers.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var, VjpFault};
use crate::error::{Error, Result};
use crate::tensor::{conv, ops, Conv2dGeometry, Element, Tensor};

/// Largest `W2` (in elements) the naive-full realization will accept.
pub const FULL_KERNEL_BUDGET: usize = 1 << 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolterraMode {
    NaiveFull,
    #[default]
    LowRank,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
}

/// Structure of one Volterra layer. Parameters live outside this struct, in the
/// canonical order reported by [`VolterraLayerSpec::param_shapes`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolterraLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// Number of factor pairs in low-rank mode. Zero leaves only the linear term.
    pub rank: usize,
    pub mode: VolterraMode,
    pub activation: Activation,
}

impl VolterraLayerSpec {
    /// Square-kernel low-rank layer with unit stride, "same" padding and one group.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rank: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            rank,
            mode: VolterraMode::LowRank,
            activation: Activation::Identity,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_mode(mut self, mode: VolterraMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn geometry(&self) -> Conv2dGeometry {
        Conv2dGeometry::new(self.stride, self.padding, self.groups)
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    /// Length of one receptive field: `Cin/groups * kh * kw`.
    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kernel.0 * self.kernel.1
    }

    fn kernel_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_per_group(), self.kernel.0, self.kernel.1]
    }

    fn full_shape(&self) -> Vec<usize> {
        let (c, kh, kw) = (self.in_per_group(), self.kernel.0, self.kernel.1);
        vec![self.out_channels, c, kh, kw, c, kh, kw]
    }

    pub fn has_quadratic(&self) -> bool {
        match self.mode {
            VolterraMode::NaiveFull => true,
            VolterraMode::LowRank => self.rank > 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("Volterra layer needs positive channel counts"));
        }
        if g == 0 || self.in_channels % g != 0 || self.out_channels % g != 0 {
            return Err(Error::config(format!(
                "groups={g} must divide in_channels={} and out_channels={}",
                self.in_channels, self.out_channels
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(Error::config("kernel extents and stride must be positive"));
        }
        if self.mode == VolterraMode::NaiveFull {
            let elems: usize = self.full_shape().iter().product();
            if elems > FULL_KERNEL_BUDGET {
                return Err(Error::config(format!(
                    "full quadratic kernel needs {elems} elements, budget is {FULL_KERNEL_BUDGET}"
                )));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order:
    /// `w1, bias` then either `w2` (naive-full) or `a1, b1, ..., aQ, bQ` (low-rank).
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("w1".to_string(), self.kernel_shape()),
            ("bias".to_string(), vec![self.out_channels]),
        ];
        match self.mode {
            VolterraMode::NaiveFull => out.push(("w2".to_string(), self.full_shape())),
            VolterraMode::LowRank => {
                for q in 1..=self.rank {
                    out.push((format!("a{q}"), self.kernel_shape()));
                    out.push((format!("b{q}"), self.kernel_shape()));
                }
            }
        }
        out
    }

    /// Fan-in scaled uniform initialization; factor pairs are shrunk by
    /// `1/sqrt(Q)` and the bias starts at zero.
    pub fn init_params<T: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor<T>> {
        let bound = 1.0 / (self.fan_in() as f64).sqrt();
        let factor_bound = bound / (self.rank.max(1) as f64).sqrt();
        let full_bound = 1.0 / self.fan_in() as f64;
        self.param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let b = match name.as_str() {
                    "bias" => return Tensor::zeros(&shape),
                    "w1" => bound,
                    "w2" => full_bound,
                    _ => factor_bound,
                };
                uniform(&shape, b, rng)
            })
            .collect()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 || input[1] != self.in_channels {
            return Err(Error::shape(format!(
                "Volterra layer expects [N,{},H,W], got {input:?}",
                self.in_channels
            )));
        }
        conv::conv2d_output_shape(input, &self.kernel_shape(), self.geometry())
    }

    pub fn count_params(&self) -> u64 {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// Floating-point operations for one sample of spatial size `(h, w)`.
    ///
    /// Each convolution costs `2 * MACs` with `MACs = Cout * H' * W' * Cin/g * kh * kw`.
    /// A low-rank layer runs `1 + 2Q` convolutions plus one multiply per output
    /// element per factor pair for the Hadamard products. The naive-full
    /// quadratic term costs `3 * P^2` per output element (`P` = receptive field
    /// length: one sample product and one multiply-add per kernel entry).
    /// Bias, activation and accumulation adds are not counted.
    pub fn count_flops(&self, (h, w): (usize, usize)) -> Result<u64> {
        let out = self.output_shape(&[1, self.in_channels, h, w])?;
        let out_elems = (out[1] * out[2] * out[3]) as u64;
        let p = self.fan_in() as u64;
        let conv = 2 * out_elems * p;
        Ok(match self.mode {
            VolterraMode::LowRank => conv * (1 + 2 * self.rank as u64) + out_elems * self.rank as u64,
            VolterraMode::NaiveFull => conv + 3 * out_elems * p * p,
        })
    }

    fn check_params(&self, n: usize) -> Result<()> {
        let expected = self.param_shapes().len();
        if n != expected {
            return Err(Error::shape(format!(
                "Volterra layer expects {expected} parameter tensors, got {n}"
            )));
        }
        Ok(())
    }

    /// Records the layer on `tape`; `params` follow [`Self::param_shapes`].
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<Var> {
        self.check_params(params.len())?;
        self.output_shape(tape.value(x).shape())?;
        let geom = self.geometry();
        let y = match self.mode {
            VolterraMode::LowRank => {
                let kernels: Vec<&Tensor<T>> = std::iter::once(params[0])
                    .chain(params[2..].iter().copied())
                    .map(|v| tape.value(v))
                    .collect();
                let (y, op) =
                    LowRankVolterra::forward(tape.value(x), &kernels, tape.value(params[1]), geom, tape.fault())?;
                let inputs: Vec<Var> = std::iter::once(x).chain(params.iter().copied()).collect();
                tape.custom(&inputs, y, Arc::new(op))
            }
            VolterraMode::NaiveFull => {
                let op = Arc::new(FullQuadratic { spec: self.clone() });
                let lin = tape.conv2d(x, params[0], Some(params[1]), geom)?;
                let quad = op.forward(tape.value(x), tape.value(params[2]))?;
                let q = tape.custom(&[x, params[2]], quad, op);
                tape.add(lin, q)?
            }
        };
        Ok(match self.activation {
            Activation::Identity => y,
            Activation::Relu => tape.relu(y),
            Activation::Tanh => tape.tanh(y),
        })
    }
}

fn uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// A Volterra layer together with its parameter values.
#[derive(Clone, Debug)]
pub struct VolterraLayer<T: Element> {
    pub spec: VolterraLayerSpec,
    pub params: Vec<Tensor<T>>,
}

impl<T: Element> VolterraLayer<T> {
    pub fn new(spec: VolterraLayerSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        spec.check_params(params.len())?;
        for ((name, shape), p) in spec.param_shapes().iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {name}: expected {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn random<R: Rng + ?Sized>(spec: VolterraLayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = spec.init_params(rng);
        Ok(Self { spec, params })
    }

    /// Evaluates the layer without recording gradients.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ps: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let y = self.spec.forward(&mut tape, xv, &ps)?;
        Ok(tape.value(y).clone())
    }

    /// Equivalent naive-full layer with `W2 = sum_q A_q (x) B_q`.
    pub fn to_full(&self) -> Result<Self> {
        match self.spec.mode {
            VolterraMode::NaiveFull => Ok(self.clone()),
            VolterraMode::LowRank => {
                let spec = self.spec.clone().with_mode(VolterraMode::NaiveFull);
                spec.validate()?;
                let full_shape = spec.full_shape();
                let p = self.spec.fan_in();
                let cout = self.spec.out_channels;
                let mut w2 = vec![T::zero(); cout * p * p];
                for pair in self.params[2..].chunks_exact(2) {
                    let (a, b) = (pair[0].data(), pair[1].data());
                    for o in 0..cout {
                        for i in 0..p {
                            let ai = a[o * p + i];
                            for j in 0..p {
                                let k = (o * p + i) * p + j;
                                w2[k] = w2[k] + ai * b[o * p + j];
                            }
                        }
                    }
                }
                let params = vec![
                    self.params[0].clone(),
                    self.params[1].clone(),
                    Tensor::new(&full_shape, w2)?,
                ];
                Self::new(spec, params)
            }
        }
    }

    /// Zeroes every second-order parameter, leaving a plain convolution.
    pub fn linearized(&self) -> Self {
        let mut out = self.clone();
        for p in out.params.iter_mut().skip(2) {
            *p = Tensor::zeros(p.shape());
        }
        out
    }
}

/// Direct evaluation of the full second-order filter (reference realization).
pub fn volterra_forward_naive<T: Element>(x: &Tensor<T>, layer: &VolterraLayer<T>) -> Result<Tensor<T>> {
    if layer.spec.mode != VolterraMode::NaiveFull {
        return Err(Error::config("volterra_forward_naive needs a naive-full layer"));
    }
    layer.forward(x)
}

/// Low-rank evaluation: `b + x*W1 + sum_q (x*A_q) . (x*B_q)`.
pub fn volterra_forward_lowrank<T: Element>(x: &Tensor<T>, layer: &VolterraLayer<T>) -> Result<Tensor<T>> {
    if layer.spec.mode != VolterraMode::LowRank {
        return Err(Error::config("volterra_forward_lowrank needs a low-rank layer"));
    }
    layer.forward(x)
}

/// Sequential composition of layers; `n` second-order layers give polynomial order `2^n`.
pub fn volterra_cascade<T: Element>(x: &Tensor<T>, layers: &[VolterraLayer<T>]) -> Result<Tensor<T>> {
    let specs: Vec<VolterraLayerSpec> = layers.iter().map(|l| l.spec.clone()).collect();
    check_cascade(&specs)?;
    layers.iter().try_fold(x.clone(), |h, layer| layer.forward(&h))
}

pub fn check_cascade(specs: &[VolterraLayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("cascade needs at least one layer"));
    }
    for pair in specs.windows(2) {
        if pair[0].out_channels != pair[1].in_channels {
            return Err(Error::config(format!(
                "cascade channel mismatch: {} -> {}",
                pair[0].out_channels, pair[1].in_channels
            )));
        }
    }
    Ok(())
}

/// Parallel Volterra branches over a shared input, concatenated along channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleSpec {
    pub branches: Vec<VolterraLayerSpec>,
}

impl MultiScaleSpec {
    pub fn in_channels(&self) -> usize {
        self.branches.first().map_or(0, |b| b.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(|b| b.out_channels).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .branches
            .first()
            .ok_or_else(|| Error::config("multi-scale stage needs at least one branch"))?;
        for b in &self.branches {
            b.validate()?;
            if b.in_channels != first.in_channels {
                return Err(Error::config("multi-scale branches must share input channels"));
            }
        }
        Ok(())
    }

    /// Output shape; fails when branches disagree on spatial extent.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let shapes = self
            .branches
            .iter()
            .map(|b| b.output_shape(input))
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = (shapes[0][2], shapes[0][3]);
        if let Some(s) = shapes.iter().find(|s| (s[2], s[3]) != (h, w)) {
            return Err(Error::config(format!(
                "multi-scale branches produce unequal maps: {h}x{w} vs {}x{}",
                s[2], s[3]
            )));
        }
        Ok(vec![input[0], self.out_channels(), h, w])
    }

    pub fn count_params(&self) -> u64 {
        self.branches.iter().map(VolterraLayerSpec::count_params).sum()
    }

    pub fn count_flops(&self, hw: (usize, usize)) -> Result<u64> {
        self.branches.iter().map(|b| b.count_flops(hw)).sum()
    }

    /// `params` holds each branch's parameters back to back.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<Var> {
        self.output_shape(tape.value(x).shape())?;
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut offset = 0;
        for b in &self.branches {
            let n = b.param_shapes().len();
            let ps = params
                .get(offset..offset + n)
                .ok_or_else(|| Error::shape("multi-scale parameter list too short"))?;
            outs.push(b.forward(tape, x, ps)?);
            offset += n;
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        tape.concat(&outs, 1)
    }
}

pub fn multiscale_forward<T: Element>(x: &Tensor<T>, branches: &[VolterraLayer<T>]) -> Result<Tensor<T>> {
    let spec = MultiScaleSpec {
        branches: branches.iter().map(|b| b.spec.clone()).collect(),
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ps: Vec<Var> = branches
        .iter()
        .flat_map(|b| b.params.iter())
        .map(|p| tape.constant(p.clone()))
        .collect();
    let y = spec.forward(&mut tape, xv, &ps)?;
    Ok(tape.value(y).clone())
}

/// Whole low-rank layer (before activation) as one op over
/// `(x, w1, bias, a_1, b_1, ..., a_Q, b_Q)`. All `1 + 2Q` convolutions share
/// one im2col pass; the factor responses are kept for the backward pass.
struct LowRankVolterra<T: Element> {
    geom: Conv2dGeometry,
    fault: VjpFault,
    /// `conv(x, a_q)` and `conv(x, b_q)`, interleaved.
    factors: Vec<Tensor<T>>,
}

impl<T: Element> LowRankVolterra<T> {
    /// `kernels` is `[w1, a_1, b_1, ...]`.
    fn forward(
        x: &Tensor<T>,
        kernels: &[&Tensor<T>],
        bias: &Tensor<T>,
        geom: Conv2dGeometry,
        fault: VjpFault,
    ) -> Result<(Tensor<T>, Self)> {
        let mut outs = conv::conv2d_multi(x, kernels, geom)?;
        let factors = outs.split_off(1);
        let mut y = outs.pop().expect("linear response");
        let c = y.shape()[1];
        if bias.shape() != [c] {
            return Err(Error::shape(format!("bias shape {:?} for {c} channels", bias.shape())));
        }
        let p = y.shape()[2] * y.shape()[3];
        {
            let yd = y.data_mut();
            for (i, plane) in yd.chunks_exact_mut(p).enumerate() {
                let b = bias.data()[i % c];
                plane.iter_mut().for_each(|v| *v = *v + b);
            }
            for pair in factors.chunks_exact(2) {
                for ((v, &a), &b) in yd.iter_mut().zip(pair[0].data()).zip(pair[1].data()) {
                    *v = *v + a * b;
                }
            }
        }
        Ok((y, Self { geom, fault, factors }))
    }
}

impl<T: Element> CustomOp<T> for LowRankVolterra<T> {
    fn name(&self) -> &str {
        "volterra_low_rank"
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let kernels: Vec<&Tensor<T>> = std::iter::once(inputs[1]).chain(inputs[3..].iter().copied()).collect();
        // d/d(a_q response) = g * (b_q response) and vice versa.
        let mut grads = vec![grad.clone()];
        for pair in self.factors.chunks_exact(2) {
            grads.push(ops::mul(grad, &pair[1])?);
            grads.push(ops::mul(grad, &pair[0])?);
        }
        let gr: Vec<&Tensor<T>> = grads.iter().collect();
        let mut out: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
        if needs[0] {
            out[0] = Some(conv::conv2d_backward_input_multi(&gr, &kernels, x.shape(), self.geom)?);
        }
        if needs[2] {
            out[2] = Some(conv::conv2d_backward_bias(grad));
        }
        if needs[1] || needs[3..].iter().any(|&n| n) {
            let dks = conv::conv2d_backward_kernel_multi(&gr, x, inputs[1].shape(), self.geom)?;
            let slots = std::iter::once(1).chain(3..inputs.len());
            for (slot, dk) in slots.zip(dks) {
                if needs[slot] {
                    out[slot] = Some(match self.fault {
                        VjpFault::ScaleConvKernelGrad(s) => ops::mul_scalar(&dk, T::lit(s)),
                        VjpFault::None => dk,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Quadratic term of the naive-full filter as a differentiable op over `(x, W2)`.
struct FullQuadratic {
    spec: VolterraLayerSpec,
}

/// Receptive-field indexing for one output position: entry `a` of the
/// flattened `(c, u, v)` field maps to an input offset or to zero padding.
struct Field {
    cig: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
}

impl Field {
    fn len(&self) -> usize {
        self.cig * self.kh * self.kw
    }

    /// Input offsets (within one group's channel block) of the field at `(i, j)`.
    fn offsets(&self, i: usize, j: usize, out: &mut Vec<Option<usize>>) {
        out.clear();
        for c in 0..self.cig {
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let iy = (i * self.stride + u) as isize - self.pad as isize;
                    let ix = (j * self.stride + v) as isize - self.pad as isize;
                    out.push(if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                        None
                    } else {
                        Some((c * self.h + iy as usize) * self.w + ix as usize)
                    });
                }
            }
        }
    }
}

impl FullQuadratic {
    fn field(&self, x: &[usize]) -> Field {
        Field {
            cig: self.spec.in_per_group(),
            kh: self.spec.kernel.0,
            kw: self.spec.kernel.1,
            h: x[2],
            w: x[3],
            stride: self.spec.stride,
            pad: self.spec.padding,
        }
    }

    /// `y2[n,o,i,j] = sum_{a,b} W2[o,a,b] * x_a * x_b` over the receptive field.
    fn forward<T: Element>(&self, x: &Tensor<T>, w2: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.spec.output_shape(x.shape())?;
        if w2.shape() != self.spec.full_shape().as_slice() {
            return Err(Error::shape(format!("W2 shape {:?}", w2.shape())));
        }
        let field = self.field(x.shape());
        let p = field.len();
        let [n, cout, oh, ow] = [out_shape[0], out_shape[1], out_shape[2], out_shape[3]];
        let cin = self.spec.in_channels;
        let cog = cout / self.spec.groups;
        let plane = x.shape()[2] * x.shape()[3];
        let (xd, wd) = (x.data(), w2.data());
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut offs = Vec::with_capacity(p);
        let mut patch = vec![T::zero(); p];
        for b in 0..n {
            for o in 0..cout {
                let base = (b * cin + (o / cog) * field.cig) * plane;
                let wo = &wd[o * p * p..(o + 1) * p * p];
                for i in 0..oh {
                    for j in 0..ow {
                        field.offsets(i, j, &mut offs);
                        for (dst, off) in patch.iter_mut().zip(&offs) {
                            *dst = off.map_or(T::zero(), |k| xd[base + k]);
                        }
                        let mut acc = T::zero();
                        for a in 0..p {
                            for c in 0..p {
                                acc = acc + wo[a * p + c] * patch[a] * patch[c];
                            }
                        }
                        out[((b * cout + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::new(&out_shape, out)
    }
}

impl<T: Element> CustomOp<T> for FullQuadratic {
    fn name(&self) -> &str {
        "volterra_full_quadratic"
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w2) = (inputs[0], inputs[1]);
        let field = self.field(x.shape());
        let p = field.len();
        let s = output.shape();
        let [n, cout, oh, ow] = [s[0], s[1], s[2], s[3]];
        let cin = self.spec.in_channels;
        let cog = cout / self.spec.groups;
        let plane = x.shape()[2] * x.shape()[3];
        let (xd, wd, gd) = (x.data(), w2.data(), grad.data());
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w2.len()];
        let mut offs = Vec::with_capacity(p);
        let mut patch = vec![T::zero(); p];
        for b in 0..n {
            for o in 0..cout {
                let base = (b * cin + (o / cog) * field.cig) * plane;
                let wo = &wd[o * p * p..(o + 1) * p * p];
                for i in 0..oh {
                    for j in 0..ow {
                        let g = gd[((b * cout + o) * oh + i) * ow + j];
                        field.offsets(i, j, &mut offs);
                        for (dst, off) in patch.iter_mut().zip(&offs) {
                            *dst = off.map_or(T::zero(), |k| xd[base + k]);
                        }
                        if needs[1] {
                            let dwo = &mut dw[o * p * p..(o + 1) * p * p];
                            for a in 0..p {
                                for c in 0..p {
                                    dwo[a * p + c] = dwo[a * p + c] + g * patch[a] * patch[c];
                                }
                            }
                        }
                        if needs[0] {
                            for a in 0..p {
                                let Some(k) = offs[a] else { continue };
                                let mut acc = T::zero();
                                for c in 0..p {
                                    acc = acc + (wo[a * p + c] + wo[c * p + a]) * patch[c];
                                }
                                dx[base + k] = dx[base + k] + g * acc;
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(w2.shape().to_vec(), dw)),
        ])
    }
}
