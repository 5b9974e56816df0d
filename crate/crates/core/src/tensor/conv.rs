//! 2-D cross-correlation (no kernel flip) with zero padding, stride and
//! channel groups, lowered to GEMM through im2col. Also average pooling.

use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }

    /// Output spatial extent for an `h x w` input and `kh x kw` kernel.
    pub fn output_hw(&self, (h, w): (usize, usize), (kh, kw): (usize, usize)) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 {
            return Err(Error::config("stride must be positive"));
        }
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
struct Plan {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    geom: Conv2dGeometry,
}

impl Plan {
    fn new(input: &[usize], kernel: &[usize], geom: Conv2dGeometry) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects input [N,C,H,W] and kernel [Cout,Cin/g,kh,kw], got {input:?} and {kernel:?}"
            )));
        }
        let g = geom.groups;
        let (cin, cout) = (input[1], kernel[0]);
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::config(format!(
                "groups={g} must divide input channels {cin} and output channels {cout}"
            )));
        }
        if kernel[1] != cin / g {
            return Err(Error::shape(format!(
                "kernel expects {} input channels per group, input provides {} ({cin}/{g})",
                kernel[1],
                cin / g
            )));
        }
        let (oh, ow) = geom.output_hw((input[2], input[3]), (kernel[2], kernel[3]))?;
        Ok(Self {
            n: input[0],
            cin,
            h: input[2],
            w: input[3],
            cout,
            kh: kernel[2],
            kw: kernel[3],
            oh,
            ow,
            groups: g,
            geom,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the im2col matrix (= kernel row length).
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Samples per im2col chunk, keeping the column buffer near `COL_BUDGET`.
    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.k() * self.p()).max(1)).clamp(1, self.n.max(1))
    }

    /// Offset of channel `c` of sample `n` in the input buffer.
    fn in_offset(&self, n: usize, c: usize) -> usize {
        (n * self.cin + c) * self.h * self.w
    }

    fn out_offset(&self, n: usize, c: usize) -> usize {
        (n * self.cout + c) * self.p()
    }

    /// Fills the `k x (len * p)` column matrix of group `g` for samples
    /// `n0..n0 + len`; sample `i` occupies columns `i*p..(i+1)*p`.
    fn im2col<T: Element>(&self, x: &[T], g: usize, n0: usize, len: usize, col: &mut [T]) {
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        let p = self.p();
        let ld = len * p;
        for i in 0..len {
            let base = self.in_offset(n0 + i, g * self.cin_g());
            for c in 0..self.cin_g() {
                let plane = &x[base + c * self.h * self.w..base + (c + 1) * self.h * self.w];
                for u in 0..self.kh {
                    for v in 0..self.kw {
                        let row = ((c * self.kh + u) * self.kw + v) * ld + i * p;
                        let dst = &mut col[row..row + p];
                        for oy in 0..self.oh {
                            let iy = (oy * sh + u) as isize - ph as isize;
                            let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                            if iy < 0 || iy >= self.h as isize {
                                line.fill(T::zero());
                                continue;
                            }
                            let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                            if sw == 1 {
                                // Contiguous run of in-bounds columns between zero margins.
                                let lo = pw.saturating_sub(v).min(self.ow);
                                let hi = (self.w + pw).saturating_sub(v).clamp(lo, self.ow);
                                line[..lo].fill(T::zero());
                                line[hi..].fill(T::zero());
                                line[lo..hi].copy_from_slice(&src[lo + v - pw..hi + v - pw]);
                                continue;
                            }
                            for (ox, d) in line.iter_mut().enumerate() {
                                let ix = (ox * sw + v) as isize - pw as isize;
                                *d = if ix < 0 || ix >= self.w as isize {
                                    T::zero()
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column-matrix gradient back onto the input gradient.
    fn col2im<T: Element>(&self, col: &[T], g: usize, n0: usize, len: usize, dx: &mut [T]) {
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        let p = self.p();
        let ld = len * p;
        for i in 0..len {
            let base = self.in_offset(n0 + i, g * self.cin_g());
            for c in 0..self.cin_g() {
                let plane = &mut dx[base + c * self.h * self.w..base + (c + 1) * self.h * self.w];
                for u in 0..self.kh {
                    for v in 0..self.kw {
                        let row = ((c * self.kh + u) * self.kw + v) * ld + i * p;
                        let src = &col[row..row + p];
                        for oy in 0..self.oh {
                            let iy = (oy * sh + u) as isize - ph as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                            for ox in 0..self.ow {
                                let ix = (ox * sw + v) as isize - pw as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    line[ix as usize] = line[ix as usize] + src[oy * self.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Copies the `cout_g x (len * p)` block of group `g` out of an
    /// `[N, Cout, p]` buffer.
    fn gather_out<T: Element>(&self, y: &[T], g: usize, n0: usize, len: usize, dst: &mut [T]) {
        let (p, cog) = (self.p(), self.cout_g());
        for o in 0..cog {
            for i in 0..len {
                let off = self.out_offset(n0 + i, g * cog + o);
                dst[(o * len + i) * p..(o * len + i + 1) * p].copy_from_slice(&y[off..off + p]);
            }
        }
    }

    /// Inverse of [`Plan::gather_out`].
    fn scatter_out<T: Element>(&self, src: &[T], g: usize, n0: usize, len: usize, y: &mut [T]) {
        let (p, cog) = (self.p(), self.cout_g());
        for o in 0..cog {
            for i in 0..len {
                let off = self.out_offset(n0 + i, g * cog + o);
                y[off..off + p].copy_from_slice(&src[(o * len + i) * p..(o * len + i + 1) * p]);
            }
        }
    }
}

/// Target size (elements) of the im2col buffer.
const COL_BUDGET: usize = 1 << 21;

fn plan_for<T: Element>(input: &[usize], kernels: &[&Tensor<T>], geom: Conv2dGeometry) -> Result<Plan> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::contract("convolution needs at least one kernel"))?;
    let plan = Plan::new(input, first.shape(), geom)?;
    if let Some(k) = kernels.iter().find(|k| k.shape() != first.shape()) {
        return Err(Error::shape(format!(
            "kernels {:?} and {:?} differ in shape",
            first.shape(),
            k.shape()
        )));
    }
    Ok(plan)
}

/// Output shape of a convolution without running it.
pub fn conv2d_output_shape(input: &[usize], kernel: &[usize], geom: Conv2dGeometry) -> Result<Vec<usize>> {
    let plan = Plan::new(input, kernel, geom)?;
    Ok(vec![plan.n, plan.cout, plan.oh, plan.ow])
}

/// `y[n,o,i,j] = bias[o] + sum_{c,u,v} kernel[o,c,u,v] * xpad[n, g*Cin_g + c, i*s + u, j*s + v]`
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let mut out = conv2d_multi(input, &[kernel], geom)?.remove(0);
    if let Some(b) = bias {
        let c = out.shape()[1];
        if b.shape() != [c] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {c} output channels",
                b.shape()
            )));
        }
        let p = out.shape()[2] * out.shape()[3];
        for (chunk, i) in out.data_mut().chunks_exact_mut(p).zip(0..) {
            let bv = b.data()[i % c];
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
    Ok(out)
}

/// Convolves one input with several same-shaped kernels, building the
/// im2col matrix once.
pub fn conv2d_multi<T: Element>(
    input: &Tensor<T>,
    kernels: &[&Tensor<T>],
    geom: Conv2dGeometry,
) -> Result<Vec<Tensor<T>>> {
    let plan = plan_for(input.shape(), kernels, geom)?;
    let (k, p, cog) = (plan.k(), plan.p(), plan.cout_g());
    let chunk = plan.chunk();
    let mut outs: Vec<Vec<T>> = kernels
        .iter()
        .map(|_| vec![T::zero(); plan.n * plan.cout * p])
        .collect();
    let mut col = vec![T::zero(); k * chunk * p];
    let mut tmp = vec![T::zero(); cog * chunk * p];
    let x = input.data();
    for n0 in (0..plan.n).step_by(chunk) {
        let len = chunk.min(plan.n - n0);
        let cols = len * p;
        for g in 0..plan.groups {
            plan.im2col(x, g, n0, len, &mut col);
            for (kernel, out) in kernels.iter().zip(outs.iter_mut()) {
                let ks = &kernel.data()[g * cog * k..(g + 1) * cog * k];
                gemm(cog, k, cols, T::one(), ks, (k, 1), &col, (cols, 1), T::zero(), &mut tmp);
                plan.scatter_out(&tmp, g, n0, len, out);
            }
        }
    }
    let shape = vec![plan.n, plan.cout, plan.oh, plan.ow];
    Ok(outs.into_iter().map(|o| Tensor::from_parts(shape.clone(), o)).collect())
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input<T: Element>(
    grad: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    geom: Conv2dGeometry,
) -> Result<Tensor<T>> {
    conv2d_backward_input_multi(&[grad], &[kernel], input_shape, geom)
}

/// Input gradient of several convolutions of the same input:
/// `sum_i conv2d_backward_input(grads[i], kernels[i])`.
pub fn conv2d_backward_input_multi<T: Element>(
    grads: &[&Tensor<T>],
    kernels: &[&Tensor<T>],
    input_shape: &[usize],
    geom: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let plan = plan_for(input_shape, kernels, geom)?;
    check_grads(&plan, grads, kernels.len())?;
    let (k, p, cog) = (plan.k(), plan.p(), plan.cout_g());
    let chunk = plan.chunk();
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    let mut dcol = vec![T::zero(); k * chunk * p];
    let mut tmp = vec![T::zero(); cog * chunk * p];
    for n0 in (0..plan.n).step_by(chunk) {
        let len = chunk.min(plan.n - n0);
        let cols = len * p;
        for g in 0..plan.groups {
            for (i, (grad, kernel)) in grads.iter().zip(kernels).enumerate() {
                plan.gather_out(grad.data(), g, n0, len, &mut tmp);
                let ks = &kernel.data()[g * cog * k..(g + 1) * cog * k];
                let beta = if i == 0 { T::zero() } else { T::one() };
                gemm(
                    k,
                    cog,
                    cols,
                    T::one(),
                    ks,
                    (1, k),
                    &tmp,
                    (cols, 1),
                    beta,
                    &mut dcol[..k * cols],
                );
            }
            plan.col2im(&dcol, g, n0, len, &mut dx);
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_backward_kernel<T: Element>(
    grad: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
    geom: Conv2dGeometry,
) -> Result<Tensor<T>> {
    Ok(conv2d_backward_kernel_multi(&[grad], input, kernel_shape, geom)?.remove(0))
}

/// Kernel gradients of several convolutions of the same input, sharing one
/// im2col pass.
pub fn conv2d_backward_kernel_multi<T: Element>(
    grads: &[&Tensor<T>],
    input: &Tensor<T>,
    kernel_shape: &[usize],
    geom: Conv2dGeometry,
) -> Result<Vec<Tensor<T>>> {
    let plan = Plan::new(input.shape(), kernel_shape, geom)?;
    check_grads(&plan, grads, grads.len())?;
    let (k, p, cog) = (plan.k(), plan.p(), plan.cout_g());
    let chunk = plan.chunk();
    let mut dks: Vec<Vec<T>> = grads
        .iter()
        .map(|_| vec![T::zero(); kernel_shape.iter().product()])
        .collect();
    let mut col = vec![T::zero(); k * chunk * p];
    let mut tmp = vec![T::zero(); cog * chunk * p];
    let x = input.data();
    for n0 in (0..plan.n).step_by(chunk) {
        let len = chunk.min(plan.n - n0);
        let cols = len * p;
        for g in 0..plan.groups {
            plan.im2col(x, g, n0, len, &mut col);
            for (grad, dk) in grads.iter().zip(dks.iter_mut()) {
                plan.gather_out(grad.data(), g, n0, len, &mut tmp);
                let dks = &mut dk[g * cog * k..(g + 1) * cog * k];
                gemm(cog, cols, k, T::one(), &tmp, (cols, 1), &col, (1, cols), T::one(), dks);
            }
        }
    }
    Ok(dks
        .into_iter()
        .map(|d| Tensor::from_parts(kernel_shape.to_vec(), d))
        .collect())
}

fn check_grads<T: Element>(plan: &Plan, grads: &[&Tensor<T>], expected: usize) -> Result<()> {
    let shape = [plan.n, plan.cout, plan.oh, plan.ow];
    if grads.len() != expected {
        return Err(Error::contract(format!(
            "{} gradients for {expected} kernels",
            grads.len()
        )));
    }
    match grads.iter().find(|g| g.shape() != shape) {
        Some(g) => Err(Error::shape(format!(
            "gradient shape {:?}, expected {shape:?}",
            g.shape()
        ))),
        None => Ok(()),
    }
}

/// Gradient of the bias term: sum of `grad` over batch and spatial axes.
pub fn conv2d_backward_bias<T: Element>(grad: &Tensor<T>) -> Tensor<T> {
    let s = grad.shape();
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    let gd = grad.data();
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            let off = (b * c + ch) * p;
            *d = *d + gd[off..off + p].iter().copied().sum::<T>();
        }
    }
    Tensor::from_parts(vec![c], db)
}

/// Non-overlapping `k x k` average pooling; trailing rows/columns that do
/// not fill a window are dropped.
pub fn avgpool2d<T: Element>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    x.expect_rank(4, "avgpool2d")?;
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if k == 0 || k > h || k > w {
        return Err(Error::shape(format!("avgpool2d window {k} on {h}x{w} map")));
    }
    let (oh, ow) = (h / k, w / k);
    let scale = T::lit(1.0 / (k * k) as f64);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in xd.chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for i in 0..k {
                    for j in 0..k {
                        acc = acc + plane[(oy * k + i) * w + ox * k + j];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn avgpool2d_backward<T: Element>(input_shape: &[usize], k: usize, grad: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = T::lit(1.0 / (k * k) as f64);
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (plane, gplane) in dx.chunks_exact_mut(h * w).zip(grad.data().chunks_exact(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gplane[oy * ow + ox] * scale;
                for i in 0..k {
                    for j in 0..k {
                        plane[(oy * k + i) * w + ox * k + j] = g;
                    }
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
pub fn global_avgpool2d<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(4, "global_avgpool2d")?;
    let s = x.shape();
    let hw = s[2] * s[3];
    let scale = T::lit(1.0 / hw as f64);
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect();
    Ok(Tensor::from_parts(vec![s[0], s[1]], out))
}

pub fn global_avgpool2d_backward<T: Element>(input_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let scale = T::lit(1.0 / hw as f64);
    let mut dx = Vec::with_capacity(input_shape.iter().product());
    for &g in grad.data() {
        dx.extend(std::iter::repeat_n(g * scale, hw));
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct summation over receptive fields, the reference for the GEMM path.
    fn conv2d_brute(x: &Tensor<f64>, k: &Tensor<f64>, b: Option<&Tensor<f64>>, geom: Conv2dGeometry) -> Tensor<f64> {
        let [n, cin, h, w] = x.shape().try_into().unwrap();
        let [cout, cig, kh, kw] = k.shape().try_into().unwrap();
        let cog = cout / geom.groups;
        let (oh, ow) = geom.output_hw((h, w), (kh, kw)).unwrap();
        let mut out = vec![0.0; n * cout * oh * ow];
        for bn in 0..n {
            for o in 0..cout {
                let g = o / cog;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for c in 0..cig {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let iy = (i * geom.stride.0 + u) as isize - geom.padding.0 as isize;
                                    let ix = (j * geom.stride.1 + v) as isize - geom.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((bn * cin + g * cig + c) * h + iy as usize) * w + ix as usize;
                                    let ki = ((o * cig + c) * kh + u) * kw + v;
                                    acc += k.data()[ki] * x.data()[xi];
                                }
                            }
                        }
                        out[((bn * cout + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, cout, oh, ow], out).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f64>::ones(&[3, 2, 3, 3]);
        let b = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &k, Some(&b), Conv2dGeometry::new(1, 1, 1)).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[(i / 16) % 3]);
        }
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap();
        let y = conv2d(&x, &k, None, Conv2dGeometry::default()).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn ones_kernel_counts_receptive_field() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, None, Conv2dGeometry::new(1, 1, 1)).unwrap();
        let brute = conv2d_brute(&x, &k, None, Conv2dGeometry::new(1, 1, 1));
        assert_eq!(y, brute);
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_brute_force_over_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(cin, cout, ksz, stride, pad, groups, h) in &[
            (2, 4, 3, 1, 1, 1, 5),
            (4, 6, 3, 2, 1, 2, 7),
            (3, 3, 1, 1, 0, 3, 4),
            (4, 8, 5, 1, 2, 4, 6),
            (2, 2, 2, 2, 0, 1, 5),
        ] {
            let geom = Conv2dGeometry::new(stride, pad, groups);
            let x = random(&[2, cin, h, h + 1], &mut rng);
            let k = random(&[cout, cin / groups, ksz, ksz], &mut rng);
            let b = random(&[cout], &mut rng);
            let fast = conv2d(&x, &k, Some(&b), geom).unwrap();
            let slow = conv2d_brute(&x, &k, Some(&b), geom);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn grouped_equals_sliced_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 4, 5, 5], &mut rng);
        let k = random(&[6, 2, 3, 3], &mut rng);
        let geom = Conv2dGeometry::new(1, 1, 2);
        let y = conv2d(&x, &k, None, geom).unwrap();
        let xs = ops::split(&x, 1, &[2, 2]).unwrap();
        let ks = ops::split(&k, 0, &[3, 3]).unwrap();
        let single = Conv2dGeometry::new(1, 1, 1);
        let y0 = conv2d(&xs[0], &ks[0], None, single).unwrap();
        let y1 = conv2d(&xs[1], &ks[1], None, single).unwrap();
        assert_eq!(y, ops::concat(&[&y0, &y1], 1).unwrap());
    }

    #[test]
    fn chunked_batch_matches_per_sample_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // 72 * 1024 column entries per sample: the batch spans several chunks.
        let n = 31;
        let x = random(&[n, 16, 32, 32], &mut rng);
        let k = random(&[4, 8, 3, 3], &mut rng);
        let geom = Conv2dGeometry::new(1, 1, 2);
        let y = conv2d(&x, &k, None, geom).unwrap();
        let g = random(y.shape(), &mut rng);
        let dx = conv2d_backward_input(&g, &k, x.shape(), geom).unwrap();
        let dk = conv2d_backward_kernel(&g, &x, k.shape(), geom).unwrap();
        assert!(Plan::new(x.shape(), k.shape(), geom).unwrap().chunk() < n);
        let xs = ops::split(&x, 0, &vec![1; n]).unwrap();
        let gs = ops::split(&g, 0, &vec![1; n]).unwrap();
        let mut dk_sum = Tensor::zeros(k.shape());
        for (i, (xi, gi)) in xs.iter().zip(&gs).enumerate() {
            let yi = conv2d(xi, &k, None, geom).unwrap();
            assert_eq!(yi.data(), &y.data()[i * yi.len()..(i + 1) * yi.len()]);
            let dxi = conv2d_backward_input(gi, &k, xi.shape(), geom).unwrap();
            assert_eq!(dxi.data(), &dx.data()[i * dxi.len()..(i + 1) * dxi.len()]);
            dk_sum = ops::add(&dk_sum, &conv2d_backward_kernel(gi, xi, k.shape(), geom).unwrap()).unwrap();
        }
        for (a, b) in dk.data().iter().zip(dk_sum.data()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn multi_kernel_calls_match_single_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[3, 4, 6, 5], &mut rng);
        let ks: Vec<_> = (0..3).map(|_| random(&[4, 2, 3, 3], &mut rng)).collect();
        let kr: Vec<&Tensor<f64>> = ks.iter().collect();
        let geom = Conv2dGeometry::new(2, 1, 2);
        let ys = conv2d_multi(&x, &kr, geom).unwrap();
        let gs: Vec<_> = ys.iter().map(|y| random(y.shape(), &mut rng)).collect();
        let gr: Vec<&Tensor<f64>> = gs.iter().collect();
        let dx = conv2d_backward_input_multi(&gr, &kr, x.shape(), geom).unwrap();
        let dks = conv2d_backward_kernel_multi(&gr, &x, ks[0].shape(), geom).unwrap();
        let mut dx_sum = Tensor::zeros(x.shape());
        for i in 0..3 {
            assert_eq!(ys[i], conv2d(&x, &ks[i], None, geom).unwrap());
            assert_eq!(dks[i], conv2d_backward_kernel(&gs[i], &x, ks[i].shape(), geom).unwrap());
            dx_sum = ops::add(
                &dx_sum,
                &conv2d_backward_input(&gs[i], &ks[i], x.shape(), geom).unwrap(),
            )
            .unwrap();
        }
        for (a, b) in dx.data().iter().zip(dx_sum.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let bad = random(&[4, 2, 1, 1], &mut rng);
        assert!(conv2d_multi(&x, &[&ks[0], &bad], geom).is_err());
    }

    #[test]
    fn configuration_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let k = Tensor::<f64>::zeros(&[4, 1, 3, 3]);
        let err = conv2d(&x, &k, None, Conv2dGeometry::new(1, 1, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let k = Tensor::<f64>::zeros(&[4, 3, 7, 7]);
        assert!(matches!(
            conv2d(&x, &k, None, Conv2dGeometry::default()).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn pooling() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avgpool2d(&x).unwrap().data(), &[2.5]);
        assert_eq!(avgpool2d(&x, 2).unwrap().data(), &[2.5]);
        assert_eq!(avgpool2d(&x, 1).unwrap(), x);
    }
}
