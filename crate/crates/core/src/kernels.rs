//! Forward kernels and their adjoints.
//!
//! Convolutions follow the cross-correlation convention (no kernel flip):
//! `out[f, oy, ox] = Σ_c Σ_ky Σ_kx k[f, c, ky, kx] · x[c, oy·s − p + ky, ox·s − p + kx]`
//! with zero padding. These functions carry no autodiff state; the tape in
//! [`crate::autodiff`] composes them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride and zero padding of a 2-D convolution, as `[vertical, horizontal]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride, stride],
            padding: [padding, padding],
        }
    }

    /// Output extent of a convolution over an input of `input` pixels.
    pub fn conv_out(&self, input: [usize; 2], kernel: [usize; 2]) -> Result<[usize; 2]> {
        let mut out = [0; 2];
        for d in 0..2 {
            if self.stride[d] == 0 {
                return Err(Error::invalid("conv2d", "stride must be at least 1"));
            }
            let padded = input[d] + 2 * self.padding[d];
            if kernel[d] > padded || kernel[d] == 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "kernel extent {} does not fit padded input extent {} (axis {})",
                        kernel[d], padded, d
                    ),
                ));
            }
            out[d] = (padded - kernel[d]) / self.stride[d] + 1;
        }
        Ok(out)
    }

    /// Output extent of a transposed convolution: `(H − 1)·stride − 2·pad + k`.
    pub fn transposed_out(&self, input: [usize; 2], kernel: [usize; 2]) -> Result<[usize; 2]> {
        let mut out = [0; 2];
        for d in 0..2 {
            if self.stride[d] == 0 {
                return Err(Error::invalid("transposed_conv2d", "stride must be at least 1"));
            }
            if input[d] == 0 || kernel[d] == 0 {
                return Err(Error::shape("transposed_conv2d", "zero spatial extent"));
            }
            let full = (input[d] - 1) * self.stride[d] + kernel[d];
            if full <= 2 * self.padding[d] {
                return Err(Error::shape(
                    "transposed_conv2d",
                    format!(
                        "padding {} consumes the whole output extent {} (axis {})",
                        self.padding[d], full, d
                    ),
                ));
            }
            out[d] = full - 2 * self.padding[d];
        }
        Ok(out)
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta·c`, with optional transposed storage of
/// `a` (stored `k×m`) and `b` (stored `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the buffers asserted above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Geometry {
    channels: usize,
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(x: &[f32], g: &Geometry) -> Vec<f32> {
    let cols = g.cols();
    let mut out = vec![0.0f32; g.rows() * cols];
    let [sy, sx] = g.spec.stride;
    let [py, px] = g.spec.padding;
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * sy + ky) as isize - py as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * sx + kx) as isize - px as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols_buf: &[f32], g: &Geometry) -> Vec<f32> {
    let cols = g.cols();
    let mut out = vec![0.0f32; g.channels * g.in_h * g.in_w];
    let [sy, sx] = g.spec.stride;
    let [py, px] = g.spec.padding;
    for c in 0..g.channels {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * sy + ky) as isize - py as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * sx + kx) as isize - px as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Geometry of `conv2d(x, k)` where `x` is the convolution input.
fn conv_geometry(x_shape: &[usize], k_shape: &[usize], spec: Conv2dSpec, op: &'static str) -> Result<Geometry> {
    if x_shape.len() != 3 || k_shape.len() != 4 {
        return Err(Error::shape(
            op,
            format!(
                "expected input [C,H,W] and kernel [F,C,kH,kW], got {:?} and {:?}",
                x_shape, k_shape
            ),
        ));
    }
    if x_shape[0] != k_shape[1] {
        return Err(Error::shape(
            op,
            format!("input has {} channels, kernel expects {}", x_shape[0], k_shape[1]),
        ));
    }
    let [out_h, out_w] = spec.conv_out([x_shape[1], x_shape[2]], [k_shape[2], k_shape[3]])?;
    Ok(Geometry {
        channels: x_shape[0],
        in_h: x_shape[1],
        in_w: x_shape[2],
        k_h: k_shape[2],
        k_w: k_shape[3],
        out_h,
        out_w,
        spec,
    })
}

/// Geometry of `transposed_conv2d(y, k)`, expressed as the convolution whose
/// input gradient it is: the transposed output plays the conv input role.
fn transposed_geometry(y_shape: &[usize], k_shape: &[usize], spec: Conv2dSpec) -> Result<Geometry> {
    const OP: &str = "transposed_conv2d";
    if y_shape.len() != 3 || k_shape.len() != 4 {
        return Err(Error::shape(
            OP,
            format!(
                "expected input [F,H,W] and kernel [F,C,kH,kW], got {:?} and {:?}",
                y_shape, k_shape
            ),
        ));
    }
    if y_shape[0] != k_shape[0] {
        return Err(Error::shape(
            OP,
            format!("input has {} channels, kernel expects {}", y_shape[0], k_shape[0]),
        ));
    }
    let [in_h, in_w] = spec.transposed_out([y_shape[1], y_shape[2]], [k_shape[2], k_shape[3]])?;
    Ok(Geometry {
        channels: k_shape[1],
        in_h,
        in_w,
        k_h: k_shape[2],
        k_w: k_shape[3],
        out_h: y_shape[1],
        out_w: y_shape[2],
        spec,
    })
}

/// Cross-correlation of `input [C,H,W]` with `kernel [F,C,kH,kW]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), kernel.shape(), spec, "conv2d")?;
    let filters = kernel.shape()[0];
    let cols = im2col(input.data(), &g);
    let mut out = vec![0.0f32; filters * g.cols()];
    gemm(
        filters,
        g.rows(),
        g.cols(),
        kernel.data(),
        false,
        &cols,
        false,
        &mut out,
        0.0,
    );
    Tensor::new(vec![filters, g.out_h, g.out_w], out)
}

/// Gradients of `conv2d` with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    spec: Conv2dSpec,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = conv_geometry(input.shape(), kernel.shape(), spec, "conv2d_backward")?;
    let filters = kernel.shape()[0];
    if grad_out.shape() != [filters, g.out_h, g.out_w] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "gradient shape {:?} does not match output [{}, {}, {}]",
                grad_out.shape(),
                filters,
                g.out_h,
                g.out_w
            ),
        ));
    }
    let grad_input = if want_input {
        let mut dcols = vec![0.0f32; g.rows() * g.cols()];
        gemm(
            g.rows(),
            filters,
            g.cols(),
            kernel.data(),
            true,
            grad_out.data(),
            false,
            &mut dcols,
            0.0,
        );
        Some(Tensor::new(input.shape().to_vec(), col2im(&dcols, &g))?)
    } else {
        None
    };
    let grad_kernel = if want_kernel {
        let cols = im2col(input.data(), &g);
        let mut dk = vec![0.0f32; filters * g.rows()];
        gemm(
            filters,
            g.cols(),
            g.rows(),
            grad_out.data(),
            false,
            &cols,
            true,
            &mut dk,
            0.0,
        );
        Some(Tensor::new(kernel.shape().to_vec(), dk)?)
    } else {
        None
    };
    Ok((grad_input, grad_kernel))
}

/// Transposed convolution of `input [F,H,W]` with `kernel [F,C,kH,kW]`,
/// producing `[C, (H−1)·s − 2p + kH, (W−1)·s − 2p + kW]`. It is exactly the
/// input-gradient operator of [`conv2d`] with the same kernel and spec.
pub fn transposed_conv2d(input: &Tensor, kernel: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let g = transposed_geometry(input.shape(), kernel.shape(), spec)?;
    let filters = kernel.shape()[0];
    let mut cols = vec![0.0f32; g.rows() * g.cols()];
    gemm(
        g.rows(),
        filters,
        g.cols(),
        kernel.data(),
        true,
        input.data(),
        false,
        &mut cols,
        0.0,
    );
    Tensor::new(vec![g.channels, g.in_h, g.in_w], col2im(&cols, &g))
}

pub fn transposed_conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    spec: Conv2dSpec,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = transposed_geometry(input.shape(), kernel.shape(), spec)?;
    let filters = kernel.shape()[0];
    if grad_out.shape() != [g.channels, g.in_h, g.in_w] {
        return Err(Error::shape(
            "transposed_conv2d_backward",
            format!(
                "gradient shape {:?} does not match output [{}, {}, {}]",
                grad_out.shape(),
                g.channels,
                g.in_h,
                g.in_w
            ),
        ));
    }
    let cols = im2col(grad_out.data(), &g);
    let grad_input = if want_input {
        let mut dy = vec![0.0f32; filters * g.cols()];
        gemm(
            filters,
            g.rows(),
            g.cols(),
            kernel.data(),
            false,
            &cols,
            false,
            &mut dy,
            0.0,
        );
        Some(Tensor::new(input.shape().to_vec(), dy)?)
    } else {
        None
    };
    let grad_kernel = if want_kernel {
        let mut dk = vec![0.0f32; filters * g.rows()];
        gemm(
            filters,
            g.cols(),
            g.rows(),
            input.data(),
            false,
            &cols,
            true,
            &mut dk,
            0.0,
        );
        Some(Tensor::new(kernel.shape().to_vec(), dk)?)
    } else {
        None
    };
    Ok((grad_input, grad_kernel))
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    /// `scale·x + shift`
    ScaleShift {
        scale: f32,
        shift: f32,
    },
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Pointwise {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Pointwise::Relu => x.max(0.0),
            Pointwise::Sigmoid => sigmoid(x),
            Pointwise::ScaleShift { scale, shift } => scale * x + shift,
        }
    }

    /// Derivative at input `x`, given the forward output `y`.
    pub(crate) fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::Sigmoid => y * (1.0 - y),
            Pointwise::ScaleShift { scale, .. } => scale,
        }
    }
}

pub fn pointwise(input: &Tensor, f: Pointwise) -> Tensor {
    input.map(|x| f.apply(x))
}

/// Softmax along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = input.axis_split(axis, "softmax")?;
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f64;
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e as f64;
            }
            let inv = (1.0 / total) as f32;
            for k in 0..n {
                out[at(k)] *= inv;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = y.axis_split(axis, "softmax_backward")?;
    let (yd, gd) = (y.data(), grad_out.data());
    let mut out = vec![0.0f32; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: f32 = (0..n).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..n {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Guard added under the square root of every vector norm so that the zero
/// vector has a finite derivative.
pub const NORM_EPS: f32 = 1e-12;

/// Euclidean norm along `axis`; the axis is removed from the output shape.
pub fn l2_norm(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = input.axis_split(axis, "l2_norm")?;
    let x = input.data();
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let sq: f32 = (0..n).map(|k| x[(o * n + k) * inner + i].powi(2)).sum();
            out[o * inner + i] = (sq + NORM_EPS).sqrt();
        }
    }
    let mut shape = input.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

/// Maps every input element to its slot in the reduced output.
pub(crate) fn reduction_index(shape: &[usize], axes: &[usize], op: &'static str) -> Result<(Vec<usize>, Vec<usize>)> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() {
            return Err(Error::invalid(
                op,
                format!("axis {} out of range for shape {:?}", a, shape),
            ));
        }
        if axes[..i].contains(&a) {
            return Err(Error::invalid(op, format!("axis {} repeated", a)));
        }
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &e)| e)
        .collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut coord = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for (d, &c) in coord.iter().enumerate() {
            if !axes.contains(&d) {
                o = o * shape[d] + c;
            }
        }
        index.push(o);
        for d in (0..shape.len()).rev() {
            coord[d] += 1;
            if coord[d] < shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    Ok((out_shape, index))
}

/// Reduces over `axes`, which are removed from the output shape.
pub fn reduce(input: &Tensor, kind: Reduction, axes: &[usize]) -> Result<Tensor> {
    let (out_shape, index) = reduction_index(input.shape(), axes, "reduce")?;
    let out_len: usize = out_shape.iter().product();
    let count = (input.len() / out_len.max(1)).max(1);
    let data = match kind {
        Reduction::Sum | Reduction::Mean => {
            let mut acc = vec![0.0f64; out_len];
            for (&x, &o) in input.data().iter().zip(&index) {
                acc[o] += x as f64;
            }
            let div = if kind == Reduction::Mean { count as f64 } else { 1.0 };
            acc.into_iter().map(|v| (v / div) as f32).collect()
        }
        Reduction::Max => {
            let mut acc = vec![f32::NEG_INFINITY; out_len];
            for (&x, &o) in input.data().iter().zip(&index) {
                if x > acc[o] {
                    acc[o] = x;
                }
            }
            acc
        }
    };
    Tensor::new(out_shape, data)
}

/// Gaussian taps for offsets `−r..=r` with `r = ⌊3σ⌋`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f32) -> Result<Vec<f32>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(
            "gaussian_blur2d",
            format!("sigma must be finite and non-negative, got {}", sigma),
        ));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let radius = (3.0 * sigma).floor() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| (w / total) as f32).collect())
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn blur_axis(src: &[f32], h: usize, w: usize, taps: &[f32], vertical: bool, adjoint: bool) -> Vec<f32> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            for (t, &wt) in taps.iter().enumerate() {
                let off = t as isize - r;
                let (sy, sx) = if vertical {
                    (reflect(y as isize + off, h), x)
                } else {
                    (y, reflect(x as isize + off, w))
                };
                if adjoint {
                    out[sy * w + sx] += wt * v;
                } else {
                    out[y * w + x] += wt * src[sy * w + sx];
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur of a `[H,W]` map with reflect padding.
pub fn gaussian_blur2d(input: &Tensor, sigma: f32) -> Result<Tensor> {
    input.expect_rank(2, "gaussian_blur2d")?;
    let taps = gaussian_kernel(sigma)?;
    if taps.len() == 1 {
        return Ok(input.clone());
    }
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let rows = blur_axis(input.data(), h, w, &taps, false, false);
    let out = blur_axis(&rows, h, w, &taps, true, false);
    Tensor::new(vec![h, w], out)
}

/// Adjoint of [`gaussian_blur2d`]; differs from the blur itself only at the
/// reflected borders.
pub(crate) fn gaussian_blur2d_adjoint(grad_out: &Tensor, sigma: f32) -> Result<Tensor> {
    let taps = gaussian_kernel(sigma)?;
    if taps.len() == 1 {
        return Ok(grad_out.clone());
    }
    let (h, w) = (grad_out.shape()[0], grad_out.shape()[1]);
    let cols = blur_axis(grad_out.data(), h, w, &taps, true, true);
    let out = blur_axis(&cols, h, w, &taps, false, true);
    Tensor::new(vec![h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sextuple-loop cross-correlation.
    fn naive_conv(x: &Tensor, k: &Tensor, s: usize, p: usize) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (w + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(vec![f, ho, wo]);
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[(ci * h + iy as usize) * w + ix as usize] as f64
                                    * k.data()[((fi * c + ci) * kh + ky) * kw + kx] as f64;
                            }
                        }
                    }
                    out.data_mut()[(fi * ho + oy) * wo + ox] = acc as f32;
                }
            }
        }
        out
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(vec![1, 3, 3], |i| i as f32 + 1.0);
        let k = Tensor::ones(vec![1, 1, 1, 1]);
        let y = conv2d(&x, &k, Conv2dSpec::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_ones_sum_to_nine() {
        let x = Tensor::ones(vec![1, 4, 4]);
        let k = Tensor::ones(vec![1, 1, 3, 3]);
        let y = conv2d(&x, &k, Conv2dSpec::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut r = rng(7);
        let x = Tensor::uniform(vec![2, 8, 8], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(vec![4, 2, 3, 3], -1.0, 1.0, &mut r);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let fast = conv2d(&x, &k, Conv2dSpec::new(s, p)).unwrap();
            let slow = naive_conv(&x, &k, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-5, "stride {} pad {}: {} vs {}", s, p, a, b);
            }
        }
    }

    #[test]
    fn conv_rejects_mismatched_channels_and_oversized_kernels() {
        let x = Tensor::zeros(vec![2, 5, 5]);
        let err = conv2d(&x, &Tensor::zeros(vec![1, 3, 3, 3]), Conv2dSpec::new(1, 0)).unwrap_err();
        assert!(err.to_string().contains("channels"));
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 2, 7, 7]), Conv2dSpec::new(1, 0)).is_err());
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 2, 3, 3]), Conv2dSpec::new(0, 0)).is_err());
    }

    #[test]
    fn transposed_broadcasts_single_pixel() {
        let x = Tensor::full(vec![1, 1, 1], 2.5);
        let k = Tensor::ones(vec![1, 1, 2, 2]);
        let y = transposed_conv2d(&x, &k, Conv2dSpec::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn transposed_output_extent_and_zero_input() {
        let k = Tensor::ones(vec![3, 2, 4, 4]);
        let y = transposed_conv2d(&Tensor::zeros(vec![3, 17, 17]), &k, Conv2dSpec::new(2, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 34, 34]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_equals_conv_input_gradient() {
        let mut r = rng(11);
        for (s, p, h) in [(1, 0, 6), (2, 1, 9), (2, 0, 7), (3, 1, 10)] {
            let x = Tensor::uniform(vec![3, h, h], -1.0, 1.0, &mut r);
            let k = Tensor::uniform(vec![4, 3, 3, 3], -1.0, 1.0, &mut r);
            let spec = Conv2dSpec::new(s, p);
            let y = conv2d(&x, &k, spec).unwrap();
            let g = Tensor::uniform(y.shape().to_vec(), -1.0, 1.0, &mut r);
            let (dx, _) = conv2d_backward(&x, &k, &g, spec, true, false).unwrap();
            let dx = dx.unwrap();
            let t = transposed_conv2d(&g, &k, spec).unwrap();
            // The transposed extent may drop the rows a strided conv never reads.
            let (th, tw) = (t.shape()[1], t.shape()[2]);
            for c in 0..3 {
                for yy in 0..h {
                    for xx in 0..h {
                        let a = dx.data()[(c * h + yy) * h + xx];
                        let b = if yy < th && xx < tw {
                            t.data()[(c * th + yy) * tw + xx]
                        } else {
                            0.0
                        };
                        assert!((a - b).abs() <= 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_uniform_and_rows_sum_to_one() {
        let s = softmax(&Tensor::zeros(vec![4]), 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let mut r = rng(3);
        let x = Tensor::uniform(vec![5, 7], -50.0, 50.0, &mut r);
        for axis in 0..2 {
            let y = softmax(&x, axis).unwrap();
            let sums = reduce(&y, Reduction::Sum, &[axis]).unwrap();
            assert!(sums.data().iter().all(|v| (v - 1.0).abs() <= 1e-6));
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn l2_norm_pythagorean() {
        let n = l2_norm(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), 0).unwrap();
        assert_eq!(n.shape(), &[] as &[usize]);
        assert_eq!(n.data(), &[5.0]);
    }

    #[test]
    fn reduce_over_axes() {
        let x = Tensor::from_fn(vec![2, 3, 2], |i| i as f32);
        let s = reduce(&x, Reduction::Sum, &[1]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[6.0, 9.0, 24.0, 27.0]);
        let m = reduce(&x, Reduction::Max, &[0, 2]).unwrap();
        assert_eq!(m.data(), &[7.0, 9.0, 11.0]);
        let mean = reduce(&x, Reduction::Mean, &[0, 1, 2]).unwrap();
        assert_eq!(mean.data(), &[5.5]);
        assert!(reduce(&x, Reduction::Sum, &[1, 1]).is_err());
    }

    #[test]
    fn blur_sigma_zero_is_identity() {
        let x = Tensor::from_fn(vec![5, 6], |i| (i as f32).cos());
        assert_eq!(gaussian_blur2d(&x, 0.0).unwrap(), x);
        assert!(gaussian_blur2d(&x, -1.0).is_err());
    }

    #[test]
    fn blur_preserves_constant() {
        let x = Tensor::full(vec![9, 12], 0.37);
        let y = gaussian_blur2d(&x, 2.0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() <= 1e-6));
    }

    #[test]
    fn blur_impulse_matches_sampled_kernel() {
        let (h, w, cy, cx) = (15usize, 15usize, 7usize, 7usize);
        let mut x = Tensor::zeros(vec![h, w]);
        x.data_mut()[cy * w + cx] = 1.0;
        let y = gaussian_blur2d(&x, 1.0).unwrap();
        let z: f64 = (-3..=3).map(|k: i32| (-(k * k) as f64 / 2.0).exp()).sum();
        for yy in 0..h {
            for xx in 0..w {
                let dy = yy as i32 - cy as i32;
                let dx = xx as i32 - cx as i32;
                let expect = if dy.abs() <= 3 && dx.abs() <= 3 {
                    ((-(dy * dy + dx * dx) as f64 / 2.0).exp() / (z * z)) as f32
                } else {
                    0.0
                };
                assert!((y.data()[yy * w + xx] - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn blur_preserves_interior_mass() {
        let mut x = Tensor::zeros(vec![40, 40]);
        for yy in 12..28 {
            for xx in 10..30 {
                x.data_mut()[yy * 40 + xx] = 1.0;
            }
        }
        let y = gaussian_blur2d(&x, 2.0).unwrap();
        assert!((y.sum() - x.sum()).abs() <= 1e-4 * x.sum().max(1.0));
    }

    #[test]
    fn blur_adjoint_identity() {
        let mut r = rng(5);
        let x = Tensor::uniform(vec![7, 9], -1.0, 1.0, &mut r);
        let g = Tensor::uniform(vec![7, 9], -1.0, 1.0, &mut r);
        let lhs = gaussian_blur2d(&x, 1.5).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&gaussian_blur2d_adjoint(&g, 1.5).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-3, 4), 3);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(9, 4), 3);
        assert_eq!(reflect(5, 1), 0);
    }
}
