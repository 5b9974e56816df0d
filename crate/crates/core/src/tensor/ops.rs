//! Elementwise, matrix, reduction, normalization and layout kernels.

use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    ScalarAdd,
    ScalarMul,
}

/// Right-hand operand of an elementwise operation.
#[derive(Clone, Debug)]
pub enum Operand<'a, T: Element> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

pub fn elementwise<T: Element>(op: ElementwiseOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    match (op, b) {
        (ElementwiseOp::Add, Operand::Tensor(b)) => add(a, b),
        (ElementwiseOp::Mul, Operand::Tensor(b)) => mul(a, b),
        (ElementwiseOp::Add | ElementwiseOp::ScalarAdd, Operand::Scalar(s)) => Ok(add_scalar(a, s)),
        (ElementwiseOp::Mul | ElementwiseOp::ScalarMul, Operand::Scalar(s)) => Ok(mul_scalar(a, s)),
        (op, Operand::Tensor(_)) => Err(Error::shape(format!("{op:?} expects a scalar operand"))),
    }
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x - y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x * y)
}

pub fn add_scalar<T: Element>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x + s)
}

pub fn mul_scalar<T: Element>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// `a + s * b`.
pub fn axpy<T: Element>(a: &Tensor<T>, s: T, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + s * y)
}

/// Accumulates `s * src` into `dst` in place.
pub(crate) fn axpy_into<T: Element>(dst: &mut [T], s: T, src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = *d + s * v;
    }
}

pub fn relu<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.max(T::zero()))
}

pub fn tanh<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.tanh())
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank(2, "matmul")?;
    b.expect_rank(2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner dimensions differ ({:?} x {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (k, 1),
        b.data(),
        (n, 1),
        T::zero(),
        &mut out,
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gradients of `matmul(a, b)` with respect to `a` and `b`.
pub fn matmul_backward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, grad: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    // dA = G * B^T, dB = A^T * G
    let mut da = vec![T::zero(); m * k];
    gemm(
        m,
        n,
        k,
        T::one(),
        grad.data(),
        (n, 1),
        b.data(),
        (1, n),
        T::zero(),
        &mut da,
    );
    let mut db = vec![T::zero(); k * n];
    gemm(
        k,
        m,
        n,
        T::one(),
        a.data(),
        (1, k),
        grad.data(),
        (n, 1),
        T::zero(),
        &mut db,
    );
    (Tensor::from_parts(vec![m, k], da), Tensor::from_parts(vec![k, n], db))
}

/// Affine map `x * W^T + b` for `x: [N, F]`, `W: [C, F]`, `b: [C]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(2, "linear")?;
    w.expect_rank(2, "linear")?;
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let (c, f2) = (w.shape()[0], w.shape()[1]);
    if f != f2 || b.shape() != [c] {
        return Err(Error::shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * c);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(
        n,
        f,
        c,
        T::one(),
        x.data(),
        (f, 1),
        w.data(),
        (1, f),
        T::one(),
        &mut out,
    );
    Ok(Tensor::from_parts(vec![n, c], out))
}

/// Returns `(dx, dw, db)` for [`linear`].
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let c = w.shape()[0];
    let mut dx = vec![T::zero(); n * f];
    gemm(
        n,
        c,
        f,
        T::one(),
        grad.data(),
        (c, 1),
        w.data(),
        (f, 1),
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); c * f];
    gemm(
        c,
        n,
        f,
        T::one(),
        grad.data(),
        (1, c),
        x.data(),
        (f, 1),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); c];
    for row in grad.data().chunks_exact(c) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    (
        Tensor::from_parts(vec![n, f], dx),
        Tensor::from_parts(vec![c, f], dw),
        Tensor::from_parts(vec![c], db),
    )
}

/// Splits a shape around `axis` into `(outer, extent, inner)` block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis<T: Element>(x: &Tensor<T>, axis: usize, op: &str) -> Result<()> {
    if axis >= x.ndim() {
        return Err(Error::shape(format!(
            "{op}: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Reduces along `axis`, removing it from the shape.
pub fn reduce<T: Element>(op: ReduceOp, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x, axis, "reduce")?;
    let (outer, extent, inner) = axis_blocks(x.shape(), axis);
    let data = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let vals = (0..extent).map(|e| data[base + e * inner]);
            let v = match op {
                ReduceOp::Sum => vals.sum(),
                ReduceOp::Mean => vals.sum::<T>() / T::lit(extent as f64),
                ReduceOp::Max => vals.fold(T::neg_infinity(), T::max),
            };
            out.push(v);
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

/// Gradient of [`reduce`]. For `Max`, the gradient goes to the first maximal element.
pub fn reduce_backward<T: Element>(op: ReduceOp, x: &Tensor<T>, axis: usize, grad: &Tensor<T>) -> Tensor<T> {
    let (outer, extent, inner) = axis_blocks(x.shape(), axis);
    let data = x.data();
    let g = grad.data();
    let mut dx = vec![T::zero(); x.len()];
    let scale = T::lit(1.0 / extent as f64);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let gv = g[o * inner + i];
            match op {
                ReduceOp::Sum => (0..extent).for_each(|e| dx[base + e * inner] = gv),
                ReduceOp::Mean => (0..extent).for_each(|e| dx[base + e * inner] = gv * scale),
                ReduceOp::Max => {
                    let mut best = 0;
                    for e in 1..extent {
                        if data[base + e * inner] > data[base + best * inner] {
                            best = e;
                        }
                    }
                    dx[base + best * inner] = gv;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), dx)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x, axis, "softmax")?;
    let (outer, extent, inner) = axis_blocks(x.shape(), axis);
    let data = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let max = (0..extent)
                .map(|e| data[base + e * inner])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for e in 0..extent {
                let v = (data[base + e * inner] - max).exp();
                out[base + e * inner] = v;
                total = total + v;
            }
            for e in 0..extent {
                out[base + e * inner] = out[base + e * inner] / total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// VJP of softmax given its output `y`: `dx = y * (g - <g, y>)`.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, axis: usize, grad: &Tensor<T>) -> Tensor<T> {
    let (outer, extent, inner) = axis_blocks(y.shape(), axis);
    let (yd, g) = (y.data(), grad.data());
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let dot: T = (0..extent).map(|e| yd[base + e * inner] * g[base + e * inner]).sum();
            for e in 0..extent {
                let k = base + e * inner;
                dx[k] = yd[k] * (g[k] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    check_axis(first, axis, "concat")?;
    for p in parts {
        let same_rank = p.ndim() == first.ndim();
        let same_rest = same_rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !same_rest {
            return Err(Error::shape(format!(
                "concat along axis {axis}: {:?} incompatible with {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let (outer, _, inner) = axis_blocks(first.shape(), axis);
    let total_extent: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_extent * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_extent;
    Ok(Tensor::from_parts(shape, out))
}

/// Inverse of [`concat`]: splits `x` along `axis` into pieces of the given extents.
pub fn split<T: Element>(x: &Tensor<T>, axis: usize, extents: &[usize]) -> Result<Vec<Tensor<T>>> {
    check_axis(x, axis, "split")?;
    let (outer, extent, inner) = axis_blocks(x.shape(), axis);
    if extents.iter().sum::<usize>() != extent {
        return Err(Error::shape(format!(
            "split {extents:?} does not cover axis {axis} of {:?}",
            x.shape()
        )));
    }
    let mut bufs: Vec<Vec<T>> = extents.iter().map(|e| Vec::with_capacity(outer * e * inner)).collect();
    let data = x.data();
    for o in 0..outer {
        let mut offset = o * extent * inner;
        for (buf, &e) in bufs.iter_mut().zip(extents) {
            buf.extend_from_slice(&data[offset..offset + e * inner]);
            offset += e * inner;
        }
    }
    Ok(bufs
        .into_iter()
        .zip(extents)
        .map(|(buf, &e)| {
            let mut shape = x.shape().to_vec();
            shape[axis] = e;
            Tensor::from_parts(shape, buf)
        })
        .collect())
}

/// Flattens every axis after the first: `[N, ...] -> [N, prod(...)]`.
pub fn flatten<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() < 1 {
        return Err(Error::shape("flatten of a scalar"));
    }
    let n = x.shape()[0];
    x.reshape(&[n, x.len() / n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let z = elementwise(ElementwiseOp::Add, &x, Operand::Scalar(0.0)).unwrap();
        assert_eq!(z, x);
        let sq = elementwise(ElementwiseOp::Mul, &x, Operand::Tensor(&x)).unwrap();
        assert_eq!(sq.data(), &[1.0, 4.0, 9.0, 16.0]);
        let h = t(&[2], &[1.0, 2.0]);
        let shifted = elementwise(ElementwiseOp::ScalarAdd, &h, Operand::Scalar(0.5)).unwrap();
        assert_eq!(shifted.data(), &[1.5, 2.5]);
        assert!(add(&x, &h).is_err());
        assert!(elementwise(ElementwiseOp::ScalarMul, &x, Operand::Tensor(&x)).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax(&t(&[4], &[0.0; 4]), 0).unwrap();
        assert_eq!(s.data(), &[0.25; 4]);
    }

    #[test]
    fn matmul_identity() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        assert!(matmul(&b, &b).is_err());
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t(&[2, 3], &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let b = t(&[2], &[10.0, 20.0]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[8.0, 23.0, 8.0, 27.5]);
    }

    #[test]
    fn reductions_along_axis() {
        let x = t(&[2, 3], &[1.0, 5.0, 3.0, 4.0, 2.0, 6.0]);
        assert_eq!(reduce(ReduceOp::Sum, &x, 0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(reduce(ReduceOp::Mean, &x, 1).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(reduce(ReduceOp::Max, &x, 1).unwrap().data(), &[5.0, 6.0]);
        assert!(reduce(ReduceOp::Sum, &x, 2).is_err());
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 1, 2], &[5.0, 6.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let parts = split(&c, 1, &[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat(&[&a, &t(&[1, 1, 3], &[0.0; 3])], 1).is_err());
    }
}
