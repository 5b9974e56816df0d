//! Trace-based reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node holding
//! its value and the parent references needed for its vector–Jacobian
//! product. Parents always precede children, so a single reverse sweep over
//! the node list visits each node exactly once in a valid order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{conv, ops, Conv2dGeometry, Element, ReduceOp, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the built-in op set.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &str;

    /// Vector–Jacobian product: one entry per input, `None` where `needs[i]`
    /// is false or the input does not influence the output.
    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Deliberate VJP corruption used to prove gradient checks can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum VjpFault {
    #[default]
    None,
    /// Multiply every convolution-kernel gradient by the given factor.
    ScaleConvKernelGrad(f64),
}

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    /// `a + s * b`
    Axpy(Var, T, Var),
    Relu(Var),
    Tanh(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reduce {
        x: Var,
        op: ReduceOp,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    AvgPool2d {
        x: Var,
        k: usize,
    },
    GlobalAvgPool2d(Var),
    NllProbs {
        probs: Var,
        targets: Vec<usize>,
        eps: T,
    },
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp<T>>,
    },
}

struct Node<T: Element> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Evaluation trace supporting reverse-mode differentiation.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    fault: VjpFault,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a root with respect to the leaves of a tape.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not reach the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, with unreachable leaves mapped to zeros of the leaf's shape.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: VjpFault::None,
        }
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: VjpFault) {
        self.fault = fault;
    }

    pub fn fault(&self) -> VjpFault {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient will be reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = ops::add_scalar(self.value(a), s);
        self.push(Op::AddScalar(a), v, &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let v = ops::mul_scalar(self.value(a), s);
        self.push(Op::MulScalar(a, s), v, &[a])
    }

    /// `a + s * b`
    pub fn axpy(&mut self, a: Var, s: T, b: Var) -> Result<Var> {
        let v = ops::axpy(self.value(a), s, self.value(b))?;
        Ok(self.push(Op::Axpy(a, s, b), v, &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        self.push(Op::Relu(a), v, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = ops::tanh(self.value(a));
        self.push(Op::Tanh(a), v, &[a])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, geom: Conv2dGeometry) -> Result<Var> {
        let v = conv::conv2d(self.value(input), self.value(kernel), bias.map(|b| self.value(b)), geom)?;
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            v,
            &parents,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    /// `x * W^T + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear { x, w, b }, v, &[x, w, b]))
    }

    pub fn reduce(&mut self, x: Var, op: ReduceOp, axis: usize) -> Result<Var> {
        let v = ops::reduce(op, self.value(x), axis)?;
        Ok(self.push(Op::Reduce { x, op, axis }, v, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), v, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        self.push(Op::MeanAll(x), v, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(x), axis)?;
        Ok(self.push(Op::Softmax { x, axis }, v, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&values, axis)?;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            v,
            parts,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v, &[x]))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = ops::flatten(self.value(x))?;
        Ok(self.push(Op::Reshape(x), v, &[x]))
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = conv::avgpool2d(self.value(x), k)?;
        Ok(self.push(Op::AvgPool2d { x, k }, v, &[x]))
    }

    pub fn global_avgpool2d(&mut self, x: Var) -> Result<Var> {
        let v = conv::global_avgpool2d(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool2d(x), v, &[x]))
    }

    /// Mean over the batch of `-log(max(p[n, y_n], eps))` for probabilities `p: [N, C]`.
    pub fn nll_from_probs(&mut self, probs: Var, targets: &[usize], eps: T) -> Result<Var> {
        let p = self.value(probs);
        p.expect_rank(2, "cross_entropy")?;
        let (n, c) = (p.shape()[0], p.shape()[1]);
        if targets.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for batch of {n}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!(
                "class index {bad} out of range for {c} classes"
            )));
        }
        let total: T = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| -p.data()[i * c + y].max(eps).ln())
            .sum();
        let v = Tensor::scalar(total / T::lit(n as f64));
        Ok(self.push(
            Op::NllProbs {
                probs,
                targets: targets.to_vec(),
                eps,
            },
            v,
            &[probs],
        ))
    }

    /// Records a custom operation whose forward value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Arc<dyn CustomOp<T>>) -> Var {
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
            inputs,
        )
    }

    /// Gradients of a scalar `root` with respect to every leaf that requires them.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let shape = self.value(root).shape();
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {shape:?}"
            )));
        }
        self.vjp(root, Tensor::ones(shape))
    }

    /// Pulls the cotangent `seed` (shaped like `root`) back to the leaves.
    pub fn vjp(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape(format!(
                "vjp seed {:?} does not match root {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.node_vjp(node, &g)? {
                accumulate(&mut grads[parent.0], pg)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn emit(&self, out: &mut Vec<(Var, Tensor<T>)>, v: Var, f: impl FnOnce() -> Result<Tensor<T>>) -> Result<()> {
        if self.needs(v) {
            out.push((v, f()?));
        }
        Ok(())
    }

    fn node_vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.emit(&mut out, *a, || Ok(g.clone()))?;
                self.emit(&mut out, *b, || Ok(g.clone()))?;
            }
            Op::Sub(a, b) => {
                self.emit(&mut out, *a, || Ok(g.clone()))?;
                self.emit(&mut out, *b, || Ok(g.map(|v| -v)))?;
            }
            Op::Mul(a, b) => {
                self.emit(&mut out, *a, || ops::mul(g, self.value(*b)))?;
                self.emit(&mut out, *b, || ops::mul(g, self.value(*a)))?;
            }
            Op::AddScalar(a) => self.emit(&mut out, *a, || Ok(g.clone()))?,
            Op::MulScalar(a, s) => self.emit(&mut out, *a, || Ok(ops::mul_scalar(g, *s)))?,
            Op::Axpy(a, s, b) => {
                self.emit(&mut out, *a, || Ok(g.clone()))?;
                self.emit(&mut out, *b, || Ok(ops::mul_scalar(g, *s)))?;
            }
            Op::Relu(a) => {
                self.emit(&mut out, *a, || {
                    g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })
                })?;
            }
            Op::Tanh(a) => {
                self.emit(&mut out, *a, || g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y)))?;
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                self.emit(&mut out, *input, || conv::conv2d_backward_input(g, k, x.shape(), *geom))?;
                self.emit(&mut out, *kernel, || {
                    let dk = conv::conv2d_backward_kernel(g, x, k.shape(), *geom)?;
                    Ok(match self.fault {
                        VjpFault::ScaleConvKernelGrad(s) => ops::mul_scalar(&dk, T::lit(s)),
                        VjpFault::None => dk,
                    })
                })?;
                if let Some(b) = bias {
                    self.emit(&mut out, *b, || Ok(conv::conv2d_backward_bias(g)))?;
                }
            }
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), g);
                self.emit(&mut out, *a, || Ok(da.clone()))?;
                self.emit(&mut out, *b, || Ok(db.clone()))?;
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), g);
                self.emit(&mut out, *x, || Ok(dx.clone()))?;
                self.emit(&mut out, *w, || Ok(dw.clone()))?;
                self.emit(&mut out, *b, || Ok(db.clone()))?;
            }
            Op::Reduce { x, op, axis } => {
                self.emit(&mut out, *x, || Ok(ops::reduce_backward(*op, self.value(*x), *axis, g)))?;
            }
            Op::SumAll(x) => {
                let gv = g.item()?;
                self.emit(&mut out, *x, || Ok(Tensor::full(self.value(*x).shape(), gv)))?;
            }
            Op::MeanAll(x) => {
                let t = self.value(*x);
                let gv = g.item()? / T::lit(t.len() as f64);
                self.emit(&mut out, *x, || Ok(Tensor::full(t.shape(), gv)))?;
            }
            Op::Softmax { x, axis } => {
                self.emit(&mut out, *x, || Ok(ops::softmax_backward(&node.value, *axis, g)))?;
            }
            Op::Concat { parts, axis } => {
                let extents: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[*axis]).collect();
                let pieces = ops::split(g, *axis, &extents)?;
                for (&p, piece) in parts.iter().zip(pieces) {
                    if self.needs(p) {
                        out.push((p, piece));
                    }
                }
            }
            Op::Reshape(x) => self.emit(&mut out, *x, || g.reshape(self.value(*x).shape()))?,
            Op::AvgPool2d { x, k } => {
                self.emit(&mut out, *x, || {
                    Ok(conv::avgpool2d_backward(self.value(*x).shape(), *k, g))
                })?;
            }
            Op::GlobalAvgPool2d(x) => {
                self.emit(&mut out, *x, || {
                    Ok(conv::global_avgpool2d_backward(self.value(*x).shape(), g))
                })?;
            }
            Op::NllProbs { probs, targets, eps } => {
                let p = self.value(*probs);
                let c = p.shape()[1];
                let scale = g.item()? / T::lit(targets.len() as f64);
                self.emit(&mut out, *probs, || {
                    let mut d = vec![T::zero(); p.len()];
                    for (i, &y) in targets.iter().enumerate() {
                        let pv = p.data()[i * c + y];
                        if pv > *eps {
                            d[i * c + y] = -scale / pv;
                        }
                    }
                    Ok(Tensor::from_parts(p.shape().to_vec(), d))
                })?;
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let gs = op.vjp(&values, &node.value, g, &needs)?;
                if gs.len() != inputs.len() {
                    return Err(Error::contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for ((&v, need), dg) in inputs.iter().zip(needs).zip(gs) {
                    if let (true, Some(dg)) = (need, dg) {
                        out.push((v, dg));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            acc.expect_same_shape(&g, "gradient accumulation")?;
            ops::axpy_into(acc.data_mut(), T::one(), g.data());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[1.0, -2.0, 5.0]).unwrap());
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_parameters_get_zeros() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let unused = tape.param(Tensor::ones(&[4]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(&tape, unused), Tensor::zeros(&[4]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let x = tape.param(Tensor::ones(&[2]));
        let y = tape.mul(c, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(!tape.requires_grad(c));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x + x) -> grad 2
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[3]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0; 3]);
    }
}
