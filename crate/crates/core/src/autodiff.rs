//! Reverse-mode differentiation over a recorded pass.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter as
//! borrowed leaves so large weight tensors are never copied per pass. A tape is
//! single-threaded; batch parallelism uses one tape per sample and sums the
//! resulting [`Gradients`].

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dSpec, Pointwise, Reduction, NORM_EPS};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Pointwise(Var, Pointwise),
    Softmax(Var, usize),
    Reduce(Var, Reduction, Vec<usize>),
    L2Norm(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv2d(Var, Var, Conv2dSpec),
    TransposedConv2d(Var, Var, Conv2dSpec),
    AddChannelBias(Var, Var),
    Linear(Var, Var),
    Squash(Var),
    PredictUhat(Var, Var),
    CoupledSum(Var, Tensor),
    Blur(Var, f32),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<&Node<'a>> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autodiff(format!("value {:?} was not recorded on this tape", v)));
        }
        Ok(&self.nodes[v.index])
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let g = self.grad_flag(inputs);
        self.push(Cow::Owned(value), op, g)
    }

    /// Owned leaf; gradients are kept for it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Borrowed leaf, typically a parameter tensor.
    pub fn param(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.check(v)?.value)
    }

    /// Sign of every ReLU input on the tape, in recording order. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Pointwise(x, Pointwise::Relu) = node.op {
                out.extend(self.val(x).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.add(self.value(b)?)?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.sub(self.value(b)?)?;
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.hadamard(self.value(b)?)?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn pointwise(&mut self, x: Var, f: Pointwise) -> Result<Var> {
        let out = kernels::pointwise(self.value(x)?, f);
        Ok(self.record(out, Op::Pointwise(x, f), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Sigmoid)
    }

    pub fn scale_shift(&mut self, x: Var, scale: f32, shift: f32) -> Result<Var> {
        self.pointwise(x, Pointwise::ScaleShift { scale, shift })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x)?, axis)?;
        Ok(self.record(out, Op::Softmax(x, axis), &[x]))
    }

    pub fn reduce(&mut self, x: Var, kind: Reduction, axes: &[usize]) -> Result<Var> {
        let out = kernels::reduce(self.value(x)?, kind, axes)?;
        Ok(self.record(out, Op::Reduce(x, kind, axes.to_vec()), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x)?.rank()).collect();
        self.reduce(x, Reduction::Sum, &axes)
    }

    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::l2_norm(self.value(x)?, axis)?;
        Ok(self.record(out, Op::L2Norm(x, axis), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x)?.clone().reshape(shape.to_vec())?;
        Ok(self.record(out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = permute(self.value(x)?, perm)?;
        Ok(self.record(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let out = kernels::conv2d(self.value(x)?, self.value(kernel)?, spec)?;
        Ok(self.record(out, Op::Conv2d(x, kernel, spec), &[x, kernel]))
    }

    pub fn transposed_conv2d(&mut self, x: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let out = kernels::transposed_conv2d(self.value(x)?, self.value(kernel)?, spec)?;
        Ok(self.record(out, Op::TransposedConv2d(x, kernel, spec), &[x, kernel]))
    }

    /// Adds `bias[c]` to every element of channel `c` of `x [C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x)?, self.value(bias)?);
        if bv.rank() != 1 || xv.rank() == 0 || xv.shape()[0] != bv.len() {
            return Err(Error::shape(
                "add_channel_bias",
                format!("input {:?} with bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let per = xv.len() / bv.len();
        let mut out = xv.clone();
        for (c, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
            let b = bv.data()[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.record(out, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    /// `weight [out, in] · x [in]`.
    pub fn linear(&mut self, weight: Var, x: Var) -> Result<Var> {
        let (w, xv) = (self.value(weight)?, self.value(x)?);
        if w.rank() != 2 || xv.rank() != 1 || w.shape()[1] != xv.len() {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} with input {:?}", w.shape(), xv.shape()),
            ));
        }
        let (m, k) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0f32; m];
        kernels::gemm(m, k, 1, w.data(), false, xv.data(), false, &mut out, 0.0);
        let out = Tensor::new(vec![m], out)?;
        Ok(self.record(out, Op::Linear(weight, x), &[weight, x]))
    }

    /// Capsule squash along the last axis.
    pub fn squash(&mut self, s: Var) -> Result<Var> {
        let out = squash(self.value(s)?)?;
        Ok(self.record(out, Op::Squash(s), &[s]))
    }

    /// Prediction vectors `û[i, j] = W[i, j]ᵀ · u[i]` for `u [N, P]` and
    /// `W [N, J, P, D]`, giving `[N, J, D]`.
    pub fn predict_uhat(&mut self, u: Var, weights: Var) -> Result<Var> {
        let out = predict_uhat(self.value(u)?, self.value(weights)?)?;
        Ok(self.record(out, Op::PredictUhat(u, weights), &[u, weights]))
    }

    /// `s[j] = Σ_i c[i, j] · û[i, j]` with the coupling `c [N, J]` held
    /// constant for differentiation.
    pub fn coupled_sum(&mut self, uhat: Var, coupling: Tensor) -> Result<Var> {
        let out = coupled_sum(self.value(uhat)?, &coupling)?;
        Ok(self.record(out, Op::CoupledSum(uhat, coupling), &[uhat]))
    }

    pub fn gaussian_blur2d(&mut self, x: Var, sigma: f32) -> Result<Var> {
        let out = kernels::gaussian_blur2d(self.value(x)?, sigma)?;
        Ok(self.record(out, Op::Blur(x, sigma), &[x]))
    }

    /// Gradients of the scalar `loss` with respect to every leaf recorded with
    /// `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !node.requires_grad {
            return Ok(Gradients { tape: self.id, grads });
        }
        grads[loss.index] = Some(Tensor::ones(node.value.shape().to_vec()));
        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, grad) in self.local_grads(node, &g)? {
                if !self.nodes[input.index].requires_grad {
                    continue;
                }
                match &mut grads[input.index] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn local_grads(&self, node: &Node<'a>, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let y = &*node.value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.needs(*a) {
                    v.push((*a, g.hadamard(self.val(*b))?));
                }
                if self.needs(*b) {
                    v.push((*b, g.hadamard(self.val(*a))?));
                }
                v
            }
            Op::Pointwise(x, f) => {
                let xv = self.val(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                    .collect();
                vec![(*x, Tensor::new(xv.shape().to_vec(), data)?)]
            }
            Op::Softmax(x, axis) => vec![(*x, kernels::softmax_backward(y, g, *axis)?)],
            Op::Reduce(x, kind, axes) => {
                let xv = self.val(*x);
                let (_, index) = kernels::reduction_index(xv.shape(), axes, "reduce")?;
                let count = (xv.len() / y.len().max(1)).max(1) as f32;
                let mut data = vec![0.0f32; xv.len()];
                match kind {
                    Reduction::Sum => {
                        for (d, &o) in data.iter_mut().zip(&index) {
                            *d = g.data()[o];
                        }
                    }
                    Reduction::Mean => {
                        for (d, &o) in data.iter_mut().zip(&index) {
                            *d = g.data()[o] / count;
                        }
                    }
                    Reduction::Max => {
                        let mut taken = vec![false; y.len()];
                        for ((d, &o), &xi) in data.iter_mut().zip(&index).zip(xv.data()) {
                            if !taken[o] && xi == y.data()[o] {
                                *d = g.data()[o];
                                taken[o] = true;
                            }
                        }
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), data)?)]
            }
            Op::L2Norm(x, axis) => {
                let xv = self.val(*x);
                let (outer, n, inner) = xv.axis_split(*axis, "l2_norm")?;
                let mut data = vec![0.0f32; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let scale = g.data()[o * inner + i] / y.data()[o * inner + i];
                        for k in 0..n {
                            let at = (o * n + k) * inner + i;
                            data[at] = scale * xv.data()[at];
                        }
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), data)?)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.val(*x).shape().to_vec())?)],
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inverse[p] = d;
                }
                vec![(*x, permute(g, &inverse)?)]
            }
            Op::Conv2d(x, k, spec) => {
                let (dx, dk) =
                    kernels::conv2d_backward(self.val(*x), self.val(*k), g, *spec, self.needs(*x), self.needs(*k))?;
                dx.map(|t| (*x, t)).into_iter().chain(dk.map(|t| (*k, t))).collect()
            }
            Op::TransposedConv2d(x, k, spec) => {
                let (dx, dk) = kernels::transposed_conv2d_backward(
                    self.val(*x),
                    self.val(*k),
                    g,
                    *spec,
                    self.needs(*x),
                    self.needs(*k),
                )?;
                dx.map(|t| (*x, t)).into_iter().chain(dk.map(|t| (*k, t))).collect()
            }
            Op::AddChannelBias(x, b) => {
                let channels = self.val(*b).len();
                let per = g.len() / channels;
                let db: Vec<f32> = g
                    .data()
                    .chunks(per.max(1))
                    .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                vec![(*x, g.clone()), (*b, Tensor::new(vec![channels], db)?)]
            }
            Op::Linear(w, x) => {
                let (wv, xv) = (self.val(*w), self.val(*x));
                let (m, k) = (wv.shape()[0], wv.shape()[1]);
                let mut v = Vec::with_capacity(2);
                if self.needs(*w) {
                    let mut dw = vec![0.0f32; m * k];
                    kernels::gemm(m, 1, k, g.data(), false, xv.data(), false, &mut dw, 0.0);
                    v.push((*w, Tensor::new(vec![m, k], dw)?));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; k];
                    kernels::gemm(k, m, 1, wv.data(), true, g.data(), false, &mut dx, 0.0);
                    v.push((*x, Tensor::new(vec![k], dx)?));
                }
                v
            }
            Op::Squash(s) => vec![(*s, squash_backward(self.val(*s), g)?)],
            Op::PredictUhat(u, w) => {
                let (du, dw) = predict_uhat_backward(self.val(*u), self.val(*w), g, self.needs(*u), self.needs(*w));
                du.map(|t| (*u, t)).into_iter().chain(dw.map(|t| (*w, t))).collect()
            }
            Op::CoupledSum(uhat, c) => vec![(*uhat, coupled_sum_backward(self.val(*uhat), c, g)?)],
            Op::Blur(x, sigma) => vec![(*x, kernels::gaussian_blur2d_adjoint(g, *sigma)?)],
        };
        Ok(out)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the leaf does not require gradients or
    /// the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but yields zeros shaped like the leaf when the
    /// loss does not reach it.
    pub fn get_or_zeros(&self, tape: &Tape<'_>, v: Var) -> Result<Tensor> {
        let shape = tape.value(v)?.shape().to_vec();
        Ok(self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(
            "permute",
            format!("{:?} is not a permutation of {} axes", perm, rank),
        ));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut coord = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = coord.iter().zip(&strides).map(|(c, s)| c * s).sum();
        out.push(x.data()[src]);
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// `v = (‖s‖² / (1 + ‖s‖²)) · s / ‖s‖` along the last axis, with
/// `‖s‖ = sqrt(Σ s² + 1e-12)`.
pub fn squash(s: &Tensor) -> Result<Tensor> {
    let d = *s
        .shape()
        .last()
        .ok_or_else(|| Error::shape("squash", "scalar input has no capsule axis"))?;
    let mut out = s.clone();
    if d == 0 {
        return Ok(out);
    }
    for v in out.data_mut().chunks_mut(d) {
        let n = (v.iter().map(|x| x * x).sum::<f32>() + NORM_EPS).sqrt();
        let f = n / (1.0 + n * n);
        v.iter_mut().for_each(|x| *x *= f);
    }
    Ok(out)
}

fn squash_backward(s: &Tensor, g: &Tensor) -> Result<Tensor> {
    let d = *s.shape().last().unwrap_or(&1);
    let mut out = vec![0.0f32; s.len()];
    if d == 0 {
        return Tensor::new(s.shape().to_vec(), out);
    }
    for ((sv, gv), ov) in s.data().chunks(d).zip(g.data().chunks(d)).zip(out.chunks_mut(d)) {
        let n2 = sv.iter().map(|x| x * x).sum::<f32>() + NORM_EPS;
        let n = n2.sqrt();
        let f = n / (1.0 + n2);
        let df = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
        let sg: f32 = sv.iter().zip(gv).map(|(a, b)| a * b).sum();
        let coef = df / n * sg;
        for k in 0..d {
            ov[k] = f * gv[k] + coef * sv[k];
        }
    }
    Tensor::new(s.shape().to_vec(), out)
}

fn uhat_dims(u: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if u.rank() != 2 || w.rank() != 4 || u.shape()[0] != w.shape()[0] || u.shape()[1] != w.shape()[2] {
        return Err(Error::shape(
            "predict_uhat",
            format!("u {:?} does not conform to W {:?}", u.shape(), w.shape()),
        ));
    }
    Ok((w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]))
}

pub fn predict_uhat(u: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, j, p, d) = uhat_dims(u, w)?;
    let mut out = vec![0.0f32; n * j * d];
    let (ud, wd) = (u.data(), w.data());
    for i in 0..n {
        let ui = &ud[i * p..(i + 1) * p];
        for c in 0..j {
            let dst = &mut out[(i * j + c) * d..(i * j + c + 1) * d];
            let block = &wd[(i * j + c) * p * d..(i * j + c + 1) * p * d];
            for (a, &ua) in ui.iter().enumerate() {
                let row = &block[a * d..(a + 1) * d];
                for (o, &wv) in dst.iter_mut().zip(row) {
                    *o += ua * wv;
                }
            }
        }
    }
    Tensor::new(vec![n, j, d], out)
}

fn predict_uhat_backward(
    u: &Tensor,
    w: &Tensor,
    g: &Tensor,
    want_u: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, j, p, d) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ud, wd, gd) = (u.data(), w.data(), g.data());
    let du = want_u.then(|| {
        let mut du = vec![0.0f32; n * p];
        for i in 0..n {
            for c in 0..j {
                let gi = &gd[(i * j + c) * d..(i * j + c + 1) * d];
                let block = &wd[(i * j + c) * p * d..(i * j + c + 1) * p * d];
                for a in 0..p {
                    let row = &block[a * d..(a + 1) * d];
                    du[i * p + a] += row.iter().zip(gi).map(|(x, y)| x * y).sum::<f32>();
                }
            }
        }
        Tensor::new(vec![n, p], du).expect("shape")
    });
    let dw = want_w.then(|| {
        let mut dw = vec![0.0f32; w.len()];
        for i in 0..n {
            let ui = &ud[i * p..(i + 1) * p];
            for c in 0..j {
                let gi = &gd[(i * j + c) * d..(i * j + c + 1) * d];
                let block = &mut dw[(i * j + c) * p * d..(i * j + c + 1) * p * d];
                for (a, &ua) in ui.iter().enumerate() {
                    for (o, &gv) in block[a * d..(a + 1) * d].iter_mut().zip(gi) {
                        *o = ua * gv;
                    }
                }
            }
        }
        Tensor::new(w.shape().to_vec(), dw).expect("shape")
    });
    (du, dw)
}

fn coupled_dims(uhat: &Tensor, c: &Tensor) -> Result<(usize, usize, usize)> {
    if uhat.rank() != 3 || c.shape() != &uhat.shape()[..2] {
        return Err(Error::shape(
            "coupled_sum",
            format!("û {:?} with coupling {:?}", uhat.shape(), c.shape()),
        ));
    }
    Ok((uhat.shape()[0], uhat.shape()[1], uhat.shape()[2]))
}

pub fn coupled_sum(uhat: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (n, j, d) = coupled_dims(uhat, c)?;
    let mut out = vec![0.0f32; j * d];
    for i in 0..n {
        for k in 0..j {
            let cik = c.data()[i * j + k];
            let src = &uhat.data()[(i * j + k) * d..(i * j + k + 1) * d];
            for (o, &x) in out[k * d..(k + 1) * d].iter_mut().zip(src) {
                *o += cik * x;
            }
        }
    }
    Tensor::new(vec![j, d], out)
}

fn coupled_sum_backward(uhat: &Tensor, c: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (n, j, d) = coupled_dims(uhat, c)?;
    let mut out = vec![0.0f32; n * j * d];
    for i in 0..n {
        for k in 0..j {
            let cik = c.data()[i * j + k];
            let dst = &mut out[(i * j + k) * d..(i * j + k + 1) * d];
            for (o, &gv) in dst.iter_mut().zip(&g.data()[k * d..(k + 1) * d]) {
                *o = cik * gv;
            }
        }
    }
    Tensor::new(uhat.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f32 - 2.0), true);
        let loss = tape.sum_all(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(vec![2, 3]));
    }

    #[test]
    fn gradient_of_sum_of_squares_is_twice_x() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(vec![5], |i| i as f32 * 0.5 - 1.0);
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.hadamard(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn foreign_and_non_scalar_values_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let xa = a.leaf(Tensor::scalar(1.0), true);
        let xb = b.leaf(Tensor::ones(vec![2]), true);
        assert!(matches!(a.backward(xb), Err(Error::Autodiff(_))));
        assert!(matches!(b.backward(xb), Err(Error::Autodiff(_))));
        assert!(a.add(xa, xb).is_err());
        assert!(a.backward(xa).is_ok());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![3]), true);
        let c = tape.constant(Tensor::full(vec![3], 2.0));
        let y = tape.hadamard(x, c).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::from_fn(vec![2, 3, 4], |i| i as f32);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], x.data()[4]);
        let back = permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }
}
