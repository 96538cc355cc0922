//! Reverse-mode differentiation over a recorded trace.
//!
//! A [`Tape`] owns every tensor produced during a forward pass together with
//! the op that produced it. Ops append nodes in execution order, so the node
//! list is already topologically sorted; [`Tape::backward`] walks it once in
//! reverse, accumulating gradients in a fixed, reproducible order. A tape is
//! confined to one thread for its forward and backward; independent tapes
//! may run concurrently.

use crate::error::{CfilError, Result};
use crate::shape::Shape;
use crate::tensor::{Scalar, Tensor};

/// Inputs with any |value| above this are rejected by the pairwise distance
/// kernel in single precision; the kernel grows quadratically and would
/// overflow f32 before the softmax max-subtraction can help.
pub const PSI_INPUT_GUARD: f64 = 1e3;

/// Probabilities are clamped here before the log in the NLL loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    SoftmaxRows {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Affine {
        input: Var,
        mul: T,
    },
    Sum {
        input: Var,
    },
    PairwisePsi {
        x: Var,
        y: Var,
        sign: T,
    },
    /// Fused distance-kernel weighting: row i of the implicit n x n matrix
    /// is softmax_j psi(anchor_i, compare_j), applied to `values`. The
    /// weight matrix is saved for backward; the psi matrix is never
    /// materialized.
    CrossWeighted {
        anchor: Var,
        compare: Var,
        values: Var,
        sign: T,
        weights: Vec<T>,
    },
    NllFromProbs {
        probs: Var,
        labels: Vec<usize>,
    },
    BatchSelect {
        input: Var,
        index: usize,
    },
    BatchStack {
        inputs: Vec<Var>,
    },
}

struct Node<T: Scalar> {
    tensor: Tensor<T>,
    op: Op<T>,
    /// Whether any gradient-requiring leaf feeds this node; backward skips
    /// whole subgraphs (e.g. a frozen backbone) where it is false.
    needs: bool,
}

/// Execution trace of differentiable ops (see module docs).
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Gradients reach it only if `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    fn op_inputs(op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
            Op::MaxPool2d { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::GlobalMaxPool { input, .. }
            | Op::SoftmaxRows { input }
            | Op::Reshape { input }
            | Op::Relu { input }
            | Op::Scale { input, .. }
            | Op::Affine { input, .. }
            | Op::Sum { input }
            | Op::BatchSelect { input, .. } => vec![*input],
            Op::Concat { inputs, .. } | Op::BatchStack { inputs } => inputs.clone(),
            Op::PairwisePsi { x, y, .. } => vec![*x, *y],
            Op::CrossWeighted {
                anchor,
                compare,
                values,
                ..
            } => vec![*anchor, *compare, *values],
            Op::NllFromProbs { probs, .. } => vec![*probs],
        }
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> Var {
        let needs = match &op {
            Op::Leaf => tensor.requires_grad(),
            _ => Self::op_inputs(&op)
                .iter()
                .any(|v| self.nodes[v.0].needs),
        };
        self.nodes.push(Node { tensor, op, needs });
        Var(self.nodes.len() - 1)
    }

    fn vals(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.values()
    }

    fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].tensor.shape()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.rank() != 2 {
            return Err(CfilError::Dimension {
                op,
                lhs: s.to_string(),
                rhs: "rank-2 tensor".into(),
            });
        }
        Ok((s.dims()[0], s.dims()[1]))
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(v);
        if s.rank() != 4 {
            return Err(CfilError::Dimension {
                op,
                lhs: s.to_string(),
                rhs: "rank-4 tensor (NxCxHxW)".into(),
            });
        }
        let d = s.dims();
        Ok((d[0], d[1], d[2], d[3]))
    }

    // ------------------------------------------------------------------
    // Forward ops
    // ------------------------------------------------------------------

    /// Standard matrix product, p x q times q x r.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a, "matmul")?;
        let (q2, r) = self.dims2(b, "matmul")?;
        if q != q2 {
            return Err(CfilError::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_string(),
                rhs: self.shape(b).to_string(),
            });
        }
        let out = matmul_raw(self.vals(a), self.vals(b), p, q, r);
        let t = Tensor::new(Shape::of(&[p, r]), out)?;
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    /// x(N x D) * w(D x K) + bias(K) broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "linear")?;
        let (d2, k) = self.dims2(w, "linear")?;
        if d != d2 {
            return Err(CfilError::Dimension {
                op: "linear",
                lhs: self.shape(x).to_string(),
                rhs: self.shape(w).to_string(),
            });
        }
        if self.shape(b).len() != k {
            return Err(CfilError::Dimension {
                op: "linear bias",
                lhs: self.shape(b).to_string(),
                rhs: format!("{k} lanes"),
            });
        }
        let mut out = matmul_raw(self.vals(x), self.vals(w), n, d, k);
        let bias = self.vals(b);
        for row in out.chunks_exact_mut(k) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let t = Tensor::new(Shape::of(&[n, k]), out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// 2-D convolution with zero padding. Input N x C x H x W, kernel
    /// K x C x k x k, bias K.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "conv2d")?;
        let ks = self.shape(kernel);
        if ks.rank() != 4 || ks.dims()[1] != c || ks.dims()[2] != ks.dims()[3] {
            return Err(CfilError::Dimension {
                op: "conv2d kernel",
                lhs: ks.to_string(),
                rhs: format!("Kx{c}xkxk"),
            });
        }
        let (kq, kk) = (ks.dims()[0], ks.dims()[2]);
        if self.shape(bias).len() != kq {
            return Err(CfilError::Dimension {
                op: "conv2d bias",
                lhs: self.shape(bias).to_string(),
                rhs: format!("{kq} lanes"),
            });
        }
        if stride < 1 {
            return Err(CfilError::Contract("conv2d stride must be >= 1".into()));
        }
        if kk > h + 2 * padding || kk > w + 2 * padding {
            return Err(CfilError::Dimension {
                op: "conv2d",
                lhs: format!("kernel {kk}x{kk}"),
                rhs: format!("padded input {}x{}", h + 2 * padding, w + 2 * padding),
            });
        }
        let oh = (h + 2 * padding - kk) / stride + 1;
        let ow = (w + 2 * padding - kk) / stride + 1;
        let mut out = vec![T::zero(); n * kq * oh * ow];
        {
            let inp = self.vals(input);
            let ker = self.vals(kernel);
            let bs = self.vals(bias);
            for ni in 0..n {
                for ko in 0..kq {
                    let out_plane = &mut out[(ni * kq + ko) * oh * ow..][..oh * ow];
                    out_plane.fill(bs[ko]);
                    for ci in 0..c {
                        let in_plane = &inp[(ni * c + ci) * h * w..][..h * w];
                        let k_plane = &ker[(ko * c + ci) * kk * kk..][..kk * kk];
                        for ky in 0..kk {
                            let k_row = &k_plane[ky * kk..][..kk];
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = &in_plane[iy as usize * w..][..w];
                                let out_row = &mut out_plane[oy * ow..][..ow];
                                if stride == 1 {
                                    // ix = ox + kx - padding: shift-and-add
                                    // over the contiguous valid window.
                                    for (kx, &kv) in k_row.iter().enumerate() {
                                        let ox_lo =
                                            (padding as isize - kx as isize).max(0) as usize;
                                        let ox_hi = (w as isize + padding as isize
                                            - kx as isize)
                                            .min(ow as isize)
                                            .max(0)
                                            as usize;
                                        if ox_lo >= ox_hi {
                                            continue;
                                        }
                                        let ix_lo = ox_lo + kx - padding;
                                        for (o, &iv) in out_row[ox_lo..ox_hi]
                                            .iter_mut()
                                            .zip(&in_row[ix_lo..ix_lo + (ox_hi - ox_lo)])
                                        {
                                            *o = *o + kv * iv;
                                        }
                                    }
                                } else {
                                    for (ox, o) in out_row.iter_mut().enumerate() {
                                        for (kx, &kv) in k_row.iter().enumerate() {
                                            let ix = (ox * stride + kx) as isize
                                                - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            *o = *o + kv * in_row[ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(Shape::of(&[n, kq, oh, ow]), out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Per-window maximum; ties go to the first maximal element in scan
    /// order, so the backward routing is deterministic.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "maxpool2d")?;
        if window == 0 || stride == 0 {
            return Err(CfilError::Contract("maxpool window/stride must be >= 1".into()));
        }
        if window > h || window > w {
            return Err(CfilError::Dimension {
                op: "maxpool2d",
                lhs: format!("window {window}x{window}"),
                rhs: format!("input {h}x{w}"),
            });
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        {
            let inp = self.vals(input);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best_idx = base + (oy * stride) * w + ox * stride;
                            let mut best = inp[best_idx];
                            for ky in 0..window {
                                for kx in 0..window {
                                    let idx = base + (oy * stride + ky) * w + (ox * stride + kx);
                                    if inp[idx] > best {
                                        best = inp[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let o = ((ni * c + ci) * oh + oy) * ow + ox;
                            out[o] = best;
                            argmax[o] = best_idx;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(Shape::of(&[n, c, oh, ow]), out)?;
        Ok(self.push(t, Op::MaxPool2d { input, argmax }))
    }

    /// Mean over all spatial positions, N x C x H x W -> N x C.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "global_avg_pool")?;
        let area = T::of_f64((h * w) as f64);
        let inp = self.vals(input);
        let mut out = vec![T::zero(); n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * h * w;
            let mut acc = T::zero();
            for v in &inp[base..base + h * w] {
                acc = acc + *v;
            }
            *o = acc / area;
        }
        let t = Tensor::new(Shape::of(&[n, c]), out)?;
        Ok(self.push(t, Op::GlobalAvgPool { input }))
    }

    /// Max over all spatial positions, N x C x H x W -> N x C.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "global_max_pool")?;
        let inp = self.vals(input);
        let mut out = vec![T::zero(); n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n * c {
            let base = i * h * w;
            let mut best = inp[base];
            let mut best_idx = base;
            for (j, v) in inp[base..base + h * w].iter().enumerate() {
                if *v > best {
                    best = *v;
                    best_idx = base + j;
                }
            }
            out[i] = best;
            argmax[i] = best_idx;
        }
        let t = Tensor::new(Shape::of(&[n, c]), out)?;
        Ok(self.push(t, Op::GlobalMaxPool { input, argmax }))
    }

    /// Row softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, logits: Var) -> Result<Var> {
        let (r, c) = self.dims2(logits, "softmax_rows")?;
        if !self.nodes[logits.0].tensor.is_finite() {
            return Err(CfilError::Numeric("softmax_rows on non-finite input".into()));
        }
        let inp = self.vals(logits);
        let mut out = vec![T::zero(); r * c];
        softmax_rows_raw(inp, &mut out, r, c);
        let t = Tensor::new(Shape::of(&[r, c]), out)?;
        Ok(self.push(t, Op::SoftmaxRows { input: logits }))
    }

    /// Same flat values under a new shape.
    pub fn reshape(&mut self, input: Var, shape: Shape) -> Result<Var> {
        let t = self.nodes[input.0].tensor.reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { input }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(CfilError::Contract("concat of zero tensors".into()));
        }
        let rank = self.shape(inputs[0]).rank();
        if axis >= rank {
            return Err(CfilError::Contract(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut out_dims = self.shape(inputs[0]).dims().to_vec();
        for &v in &inputs[1..] {
            let s = self.shape(v);
            if s.rank() != rank {
                return Err(CfilError::Dimension {
                    op: "concat",
                    lhs: self.shape(inputs[0]).to_string(),
                    rhs: s.to_string(),
                });
            }
            for (d, (&a, &b)) in out_dims.iter().zip(s.dims()).enumerate() {
                if d != axis && a != b {
                    return Err(CfilError::Dimension {
                        op: "concat",
                        lhs: self.shape(inputs[0]).to_string(),
                        rhs: s.to_string(),
                    });
                }
            }
            out_dims[axis] += s.dims()[axis];
        }
        // Row-major copy: outer = product of dims before axis, inner = after.
        let outer: usize = out_dims[..axis].iter().product();
        let inner: usize = out_dims[axis + 1..].iter().product();
        let total: usize = out_dims.iter().product();
        let mut out = vec![T::zero(); total];
        let mut axis_offset = 0usize;
        let out_axis = out_dims[axis];
        for &v in inputs {
            let a_len = self.shape(v).dims()[axis];
            let vals = self.vals(v);
            for o in 0..outer {
                let src = o * a_len * inner;
                let dst = (o * out_axis + axis_offset) * inner;
                out[dst..dst + a_len * inner].copy_from_slice(&vals[src..src + a_len * inner]);
            }
            axis_offset += a_len;
        }
        let t = Tensor::new(Shape::new(out_dims)?, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let inp = self.vals(input);
        let out: Vec<T> = inp.iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(self.shape(input).clone(), out)?;
        Ok(self.push(t, Op::Relu { input }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_check(a, b, "add")?;
        let out: Vec<T> = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).clone(), out)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_check(a, b, "mul")?;
        let out: Vec<T> = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).clone(), out)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out: Vec<T> = self.vals(input).iter().map(|&v| v * factor).collect();
        let t = Tensor::new(self.shape(input).clone(), out)?;
        Ok(self.push(t, Op::Scale { input, factor }))
    }

    /// Elementwise v * mul + add with scalar constants.
    pub fn affine(&mut self, input: Var, mul: T, add: T) -> Result<Var> {
        let out: Vec<T> = self.vals(input).iter().map(|&v| v * mul + add).collect();
        let t = Tensor::new(self.shape(input).clone(), out)?;
        Ok(self.push(t, Op::Affine { input, mul }))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.vals(input) {
            acc = acc + v;
        }
        let t = Tensor::scalar(acc);
        Ok(self.push(t, Op::Sum { input }))
    }

    /// All-pairs distance kernel: out[i][j] = sign*(x_i - y_j)^2 + (x_i^2 - y_j^2).
    /// `x` and `y` may be the same var (self-similarity).
    pub fn pairwise_psi(&mut self, x: Var, y: Var, sign: T) -> Result<Var> {
        let n = self.shape(x).len();
        if self.shape(y).len() != n {
            return Err(CfilError::Dimension {
                op: "pairwise_psi",
                lhs: self.shape(x).to_string(),
                rhs: self.shape(y).to_string(),
            });
        }
        let guard = T::of_f64(PSI_INPUT_GUARD);
        for v in [x, y] {
            let vals = self.vals(v);
            if vals.iter().any(|a| !a.is_finite()) {
                return Err(CfilError::Numeric("pairwise_psi on non-finite input".into()));
            }
            if T::GUARD_WEIGHTED_INPUTS && vals.iter().any(|a| a.abs() > guard) {
                return Err(CfilError::Numeric(format!(
                    "pairwise_psi input magnitude exceeds {PSI_INPUT_GUARD} in single precision"
                )));
            }
        }
        let xs = self.vals(x);
        let ys = self.vals(y);
        let mut out = vec![T::zero(); n * n];
        for (i, &xi) in xs.iter().enumerate() {
            let xi2 = xi * xi;
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &yj) in row.iter_mut().zip(ys) {
                let d = xi - yj;
                *o = sign * d * d + (xi2 - yj * yj);
            }
        }
        let t = Tensor::new(Shape::of(&[n, n]), out)?;
        Ok(self.push(t, Op::PairwisePsi { x, y, sign }))
    }

    /// Fused weighted operation over equal-length vectors: out_i =
    /// sum_j softmax_j(psi(anchor_i, compare_j)) * values_j, row-streamed.
    /// Output takes the shape of `values`. The three vars may coincide
    /// (the non-local case is anchor = compare = values).
    pub fn cross_weighted(
        &mut self,
        anchor: Var,
        compare: Var,
        values: Var,
        sign: T,
    ) -> Result<Var> {
        let n = self.shape(anchor).len();
        for v in [compare, values] {
            if self.shape(v).len() != n {
                return Err(CfilError::Dimension {
                    op: "cross_weighted",
                    lhs: self.shape(anchor).to_string(),
                    rhs: self.shape(v).to_string(),
                });
            }
        }
        let guard = T::of_f64(PSI_INPUT_GUARD);
        for v in [anchor, compare, values] {
            let vals = self.vals(v);
            if vals.iter().any(|a| !a.is_finite()) {
                return Err(CfilError::Numeric("cross_weighted on non-finite input".into()));
            }
            if T::GUARD_WEIGHTED_INPUTS && vals.iter().any(|a| a.abs() > guard) {
                return Err(CfilError::Numeric(format!(
                    "cross_weighted input magnitude exceeds {PSI_INPUT_GUARD} in single precision"
                )));
            }
        }
        let anchors = self.vals(anchor);
        let compares = self.vals(compare);
        let vals = self.vals(values);
        let mut weights = vec![T::zero(); n * n];
        let mut out = vec![T::zero(); n];
        let mut d_row = vec![T::zero(); n];
        for (i, &ai) in anchors.iter().enumerate() {
            let ai2 = ai * ai;
            for (d, &cj) in d_row.iter_mut().zip(compares) {
                let diff = ai - cj;
                *d = sign * diff * diff + (ai2 - cj * cj);
            }
            let w_row = &mut weights[i * n..(i + 1) * n];
            softmax_rows_raw(&d_row, w_row, 1, n);
            out[i] = dot(w_row, vals);
        }
        let t = Tensor::new(self.shape(values).clone(), out)?;
        Ok(self.push(
            t,
            Op::CrossWeighted {
                anchor,
                compare,
                values,
                sign,
                weights,
            },
        ))
    }

    /// Mean over rows of -ln(max(p[i, label_i], clamp)). `probs` is N x C.
    pub fn nll_from_probs(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(probs, "nll_from_probs")?;
        if labels.len() != n {
            return Err(CfilError::Input(format!(
                "nll_from_probs: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(CfilError::Input(format!(
                "nll_from_probs: label {bad} out of range for {c} classes"
            )));
        }
        let clamp = T::of_f64(PROB_CLAMP);
        let p = self.vals(probs);
        let mut acc = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            acc = acc - p[i * c + l].max(clamp).ln();
        }
        let t = Tensor::scalar(acc / T::of_f64(n as f64));
        Ok(self.push(
            t,
            Op::NllFromProbs {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Slice out entry `index` along axis 0, dropping that axis.
    pub fn batch_select(&mut self, input: Var, index: usize) -> Result<Var> {
        let s = self.shape(input);
        if s.rank() < 2 {
            return Err(CfilError::Dimension {
                op: "batch_select",
                lhs: s.to_string(),
                rhs: "rank >= 2".into(),
            });
        }
        let n = s.dims()[0];
        if index >= n {
            return Err(CfilError::Contract(format!(
                "batch_select index {index} out of range for batch {n}"
            )));
        }
        let rest = Shape::new(s.dims()[1..].to_vec())?;
        let per = rest.len();
        let vals = self.vals(input)[index * per..(index + 1) * per].to_vec();
        let t = Tensor::new(rest, vals)?;
        Ok(self.push(t, Op::BatchSelect { input, index }))
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn batch_stack(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(CfilError::Contract("batch_stack of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).clone();
        let per = first.len();
        let mut out = Vec::with_capacity(per * inputs.len());
        for &v in inputs {
            if self.shape(v) != &first {
                return Err(CfilError::Dimension {
                    op: "batch_stack",
                    lhs: first.to_string(),
                    rhs: self.shape(v).to_string(),
                });
            }
            out.extend_from_slice(self.vals(v));
        }
        let mut dims = vec![inputs.len()];
        dims.extend_from_slice(first.dims());
        let t = Tensor::new(Shape::new(dims)?, out)?;
        Ok(self.push(
            t,
            Op::BatchStack {
                inputs: inputs.to_vec(),
            },
        ))
    }

    fn elementwise_check(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CfilError::Dimension {
                op,
                lhs: self.shape(a).to_string(),
                rhs: self.shape(b).to_string(),
            });
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Populate gradients of d(root)/d(node) for every node. The root must
    /// be scalar. Every node gets a gradient buffer (zero if off the
    /// differentiable path); accumulation follows reverse trace order.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root).len() != 1 {
            return Err(CfilError::Contract(format!(
                "backward root must be scalar, got {}",
                self.shape(root)
            )));
        }
        for node in &mut self.nodes {
            let len = node.tensor.len();
            node.tensor.set_grad(Some(vec![T::zero(); len]));
        }
        self.nodes[root.0]
            .tensor
            .set_grad(Some(vec![T::one()]));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            // Take this node's fully-accumulated output gradient, propagate,
            // then put it back so callers can still inspect it.
            let gout = match self.nodes[i].tensor.take_grad() {
                Some(g) => g,
                None => continue,
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].tensor.set_grad(Some(gout));
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[T]) {
        let grad = self.nodes[v.0]
            .tensor
            .grad_mut()
            .expect("grad allocated in backward");
        for (g, &c) in grad.iter_mut().zip(contribution) {
            *g = *g + c;
        }
    }

    fn propagate(&mut self, node_idx: usize, op: &Op<T>, gout: &[T]) {
        match op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (p, q) = {
                    let d = self.shape(*a).dims();
                    (d[0], d[1])
                };
                let r = self.shape(*b).dims()[1];
                let bv = self.vals(*b);
                let av = self.vals(*a);
                let mut da = vec![T::zero(); p * q];
                let mut db = vec![T::zero(); q * r];
                if r == 1 {
                    // Matrix-vector case: dA = g outer b, dB = A^T g.
                    for (i, &g) in gout.iter().enumerate() {
                        axpy(&mut da[i * q..(i + 1) * q], g, bv);
                        axpy(&mut db, g, &av[i * q..(i + 1) * q]);
                    }
                } else {
                    // dA = G * B^T
                    for i in 0..p {
                        for j in 0..r {
                            let g = gout[i * r + j];
                            if g == T::zero() {
                                continue;
                            }
                            let da_row = &mut da[i * q..(i + 1) * q];
                            for (k, dv) in da_row.iter_mut().enumerate() {
                                *dv = *dv + g * bv[k * r + j];
                            }
                        }
                    }
                    // dB = A^T * G
                    for i in 0..p {
                        for k in 0..q {
                            let a_ik = av[i * q + k];
                            if a_ik == T::zero() {
                                continue;
                            }
                            let db_row = &mut db[k * r..(k + 1) * r];
                            let g_row = &gout[i * r..(i + 1) * r];
                            for (dv, &g) in db_row.iter_mut().zip(g_row) {
                                *dv = *dv + a_ik * g;
                            }
                        }
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }

            Op::Linear { x, w, b } => {
                let (n, d) = {
                    let s = self.shape(*x).dims();
                    (s[0], s[1])
                };
                let k = self.shape(*w).dims()[1];
                let wv = self.vals(*w);
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..k {
                        let g = gout[i * k + j];
                        if g == T::zero() {
                            continue;
                        }
                        let dx_row = &mut dx[i * d..(i + 1) * d];
                        for (t, dv) in dx_row.iter_mut().enumerate() {
                            *dv = *dv + g * wv[t * k + j];
                        }
                    }
                }
                let xv = self.vals(*x);
                let mut dw = vec![T::zero(); d * k];
                for i in 0..n {
                    for t in 0..d {
                        let x_it = xv[i * d + t];
                        if x_it == T::zero() {
                            continue;
                        }
                        let dw_row = &mut dw[t * k..(t + 1) * k];
                        let g_row = &gout[i * k..(i + 1) * k];
                        for (dv, &g) in dw_row.iter_mut().zip(g_row) {
                            *dv = *dv + x_it * g;
                        }
                    }
                }
                let mut db = vec![T::zero(); k];
                for row in gout.chunks_exact(k) {
                    for (dv, &g) in db.iter_mut().zip(row) {
                        *dv = *dv + g;
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*w, &dw);
                self.accumulate(*b, &db);
            }

            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (n, c, h, w) = {
                    let d = self.shape(*input).dims();
                    (d[0], d[1], d[2], d[3])
                };
                let kd = self.shape(*kernel).dims();
                let (kq, kk) = (kd[0], kd[2]);
                let od = self.shape(Var(node_idx)).dims();
                let (oh, ow) = (od[2], od[3]);
                let inp = self.vals(*input);
                let ker = self.vals(*kernel);
                let mut dinput = vec![T::zero(); inp.len()];
                let mut dkernel = vec![T::zero(); ker.len()];
                let mut dbias = vec![T::zero(); kq];
                let pad = *padding;
                let stride = *stride;
                for ni in 0..n {
                    for ko in 0..kq {
                        let g_plane = &gout[(ni * kq + ko) * oh * ow..][..oh * ow];
                        for row in g_plane.chunks_exact(ow) {
                            for &g in row {
                                dbias[ko] = dbias[ko] + g;
                            }
                        }
                        for ci in 0..c {
                            let in_plane = &inp[(ni * c + ci) * h * w..][..h * w];
                            let din_plane_base = (ni * c + ci) * h * w;
                            let k_plane = &ker[(ko * c + ci) * kk * kk..][..kk * kk];
                            let dk_plane_base = (ko * c + ci) * kk * kk;
                            for ky in 0..kk {
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let g_row = &g_plane[oy * ow..][..ow];
                                    let in_row = &in_plane[iy as usize * w..][..w];
                                    let din_row_base = din_plane_base + iy as usize * w;
                                    if stride == 1 {
                                        for kx in 0..kk {
                                            let ox_lo =
                                                (pad as isize - kx as isize).max(0) as usize;
                                            let ox_hi = (w as isize + pad as isize - kx as isize)
                                                .min(ow as isize)
                                                .max(0)
                                                as usize;
                                            if ox_lo >= ox_hi {
                                                continue;
                                            }
                                            let ix_lo = ox_lo + kx - pad;
                                            let len = ox_hi - ox_lo;
                                            let kv = k_plane[ky * kk + kx];
                                            let din_row = &mut dinput
                                                [din_row_base + ix_lo..][..len];
                                            let mut dk = T::zero();
                                            for ((dv, &g), &iv) in din_row
                                                .iter_mut()
                                                .zip(&g_row[ox_lo..ox_hi])
                                                .zip(&in_row[ix_lo..ix_lo + len])
                                            {
                                                *dv = *dv + g * kv;
                                                dk = dk + g * iv;
                                            }
                                            dkernel[dk_plane_base + ky * kk + kx] =
                                                dkernel[dk_plane_base + ky * kk + kx] + dk;
                                        }
                                    } else {
                                        for (ox, &g) in g_row.iter().enumerate() {
                                            if g == T::zero() {
                                                continue;
                                            }
                                            for kx in 0..kk {
                                                let ix = (ox * stride + kx) as isize
                                                    - pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let ii = din_row_base + ix as usize;
                                                dinput[ii] =
                                                    dinput[ii] + g * k_plane[ky * kk + kx];
                                                dkernel[dk_plane_base + ky * kk + kx] =
                                                    dkernel[dk_plane_base + ky * kk + kx]
                                                        + g * in_row[ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*input, &dinput);
                self.accumulate(*kernel, &dkernel);
                self.accumulate(*bias, &dbias);
            }

            Op::MaxPool2d { input, argmax } => {
                let mut dinput = vec![T::zero(); self.vals(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dinput[src] = dinput[src] + gout[o];
                }
                self.accumulate(*input, &dinput);
            }

            Op::GlobalAvgPool { input } => {
                let d = self.shape(*input).dims();
                let (h, w) = (d[2], d[3]);
                let area = T::of_f64((h * w) as f64);
                let mut dinput = vec![T::zero(); self.vals(*input).len()];
                for (i, &g) in gout.iter().enumerate() {
                    let share = g / area;
                    for dv in &mut dinput[i * h * w..(i + 1) * h * w] {
                        *dv = *dv + share;
                    }
                }
                self.accumulate(*input, &dinput);
            }

            Op::GlobalMaxPool { input, argmax } => {
                let mut dinput = vec![T::zero(); self.vals(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dinput[src] = dinput[src] + gout[o];
                }
                self.accumulate(*input, &dinput);
            }

            Op::SoftmaxRows { input } => {
                let (r, c) = {
                    let d = self.shape(*input).dims();
                    (d[0], d[1])
                };
                let sm = self.vals(Var(node_idx));
                let mut dinput = vec![T::zero(); r * c];
                for i in 0..r {
                    let row = &sm[i * c..(i + 1) * c];
                    let g_row = &gout[i * c..(i + 1) * c];
                    let weighted = dot(row, g_row);
                    let d_row = &mut dinput[i * c..(i + 1) * c];
                    for ((dv, &s), &g) in d_row.iter_mut().zip(row).zip(g_row) {
                        *dv = s * (g - weighted);
                    }
                }
                self.accumulate(*input, &dinput);
            }

            Op::Reshape { input } => {
                self.accumulate(*input, gout);
            }

            Op::Concat { inputs, axis } => {
                let out_dims = self.shape(Var(node_idx)).dims().to_vec();
                let outer: usize = out_dims[..*axis].iter().product();
                let inner: usize = out_dims[*axis + 1..].iter().product();
                let out_axis = out_dims[*axis];
                let mut axis_offset = 0usize;
                for &v in inputs {
                    let a_len = self.shape(v).dims()[*axis];
                    let mut dv = vec![T::zero(); self.vals(v).len()];
                    for o in 0..outer {
                        let dst = o * a_len * inner;
                        let src = (o * out_axis + axis_offset) * inner;
                        dv[dst..dst + a_len * inner]
                            .copy_from_slice(&gout[src..src + a_len * inner]);
                    }
                    self.accumulate(v, &dv);
                    axis_offset += a_len;
                }
            }

            Op::Relu { input } => {
                let inp = self.vals(*input);
                let dinput: Vec<T> = inp
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(*input, &dinput);
            }

            Op::Add { a, b } => {
                self.accumulate(*a, gout);
                self.accumulate(*b, gout);
            }

            Op::Mul { a, b } => {
                let da: Vec<T> = self.vals(*b).iter().zip(gout).map(|(&y, &g)| y * g).collect();
                let db: Vec<T> = self.vals(*a).iter().zip(gout).map(|(&x, &g)| x * g).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }

            Op::Scale { input, factor } => {
                let dinput: Vec<T> = gout.iter().map(|&g| g * *factor).collect();
                self.accumulate(*input, &dinput);
            }

            Op::Affine { input, mul } => {
                let dinput: Vec<T> = gout.iter().map(|&g| g * *mul).collect();
                self.accumulate(*input, &dinput);
            }

            Op::Sum { input } => {
                let g = gout[0];
                let dinput = vec![g; self.vals(*input).len()];
                self.accumulate(*input, &dinput);
            }

            Op::PairwisePsi { x, y, sign } => {
                // d psi / d x_i = 2 sign (x_i - y_j) + 2 x_i and
                // d psi / d y_j = -2 sign (x_i - y_j) - 2 y_j. Expanded into
                // row/column reductions of the incoming gradient G:
                //   dx_i = (2 sign + 2) x_i sum_j G - 2 sign (G . y) per row
                //   dy_j = -2 sign (G^T . x) + (2 sign - 2) y_j sum_i G
                let xs = self.vals(*x).to_vec();
                let ys = self.vals(*y).to_vec();
                let n = xs.len();
                let two = T::of_f64(2.0);
                let s2 = *sign * two;
                let mut dx = vec![T::zero(); n];
                let mut dy = vec![T::zero(); n];
                let mut col_sum = vec![T::zero(); n];
                let mut col_dot_x = vec![T::zero(); n];
                for (i, &xi) in xs.iter().enumerate() {
                    let g_row = &gout[i * n..(i + 1) * n];
                    let row_sum = sum_slice(g_row);
                    let row_dot_y = dot(g_row, &ys);
                    dx[i] = (s2 + two) * xi * row_sum - s2 * row_dot_y;
                    axpy(&mut col_sum, T::one(), g_row);
                    axpy(&mut col_dot_x, xi, g_row);
                }
                for (((dyj, &yj), &h), &cx) in
                    dy.iter_mut().zip(&ys).zip(&col_sum).zip(&col_dot_x)
                {
                    *dyj = (s2 - two) * yj * h - s2 * cx;
                }
                self.accumulate(*x, &dx);
                self.accumulate(*y, &dy);
            }

            Op::CrossWeighted {
                anchor,
                compare,
                values,
                sign,
                weights,
            } => {
                // For row i with output f_i and incoming gradient g_i:
                //   d values_j += g_i W[i][j]
                //   dD[i][j]    = W[i][j] g_i (values_j - f_i)   (softmax JVP)
                //   d anchor_i += (2s + 2) anchor_i sum_j dD - 2s (dD . compare)
                //   d compare_j += (2s - 2) compare_j colsum_j(dD) - 2s coldot_j(dD, anchor)
                let n = self.vals(*anchor).len();
                let anchors = self.vals(*anchor).to_vec();
                let compares = self.vals(*compare).to_vec();
                let vals = self.vals(*values).to_vec();
                let outs = self.vals(Var(node_idx)).to_vec();
                let two = T::of_f64(2.0);
                let s2 = *sign * two;
                let mut d_anchor = vec![T::zero(); n];
                let mut d_compare = vec![T::zero(); n];
                let mut d_values = vec![T::zero(); n];
                let mut col_sum = vec![T::zero(); n];
                let mut col_dot_a = vec![T::zero(); n];
                let mut dd_row = vec![T::zero(); n];
                for (i, &g) in gout.iter().enumerate() {
                    let w_row = &weights[i * n..(i + 1) * n];
                    if g != T::zero() {
                        axpy(&mut d_values, g, w_row);
                    }
                    let ai = anchors[i];
                    let fi = outs[i];
                    for ((dd, &w), &vj) in dd_row.iter_mut().zip(w_row).zip(&vals) {
                        *dd = w * g * (vj - fi);
                    }
                    let row_sum = sum_slice(&dd_row);
                    let row_dot_c = dot(&dd_row, &compares);
                    d_anchor[i] = (s2 + two) * ai * row_sum - s2 * row_dot_c;
                    axpy(&mut col_sum, T::one(), &dd_row);
                    axpy(&mut col_dot_a, ai, &dd_row);
                }
                for (((dc, &cj), &h), &da) in d_compare
                    .iter_mut()
                    .zip(&compares)
                    .zip(&col_sum)
                    .zip(&col_dot_a)
                {
                    *dc = (s2 - two) * cj * h - s2 * da;
                }
                self.accumulate(*anchor, &d_anchor);
                self.accumulate(*compare, &d_compare);
                self.accumulate(*values, &d_values);
            }

            Op::NllFromProbs { probs, labels } => {
                let (n, c) = {
                    let d = self.shape(*probs).dims();
                    (d[0], d[1])
                };
                let clamp = T::of_f64(PROB_CLAMP);
                let inv_n = T::one() / T::of_f64(n as f64);
                let pv = self.vals(*probs);
                let mut dp = vec![T::zero(); n * c];
                let g = gout[0];
                for (i, &l) in labels.iter().enumerate() {
                    let p = pv[i * c + l];
                    if p > clamp {
                        dp[i * c + l] = -g * inv_n / p;
                    }
                }
                self.accumulate(*probs, &dp);
            }

            Op::BatchSelect { input, index } => {
                let per = gout.len();
                let mut dinput = vec![T::zero(); self.vals(*input).len()];
                dinput[index * per..(index + 1) * per].copy_from_slice(gout);
                self.accumulate(*input, &dinput);
            }

            Op::BatchStack { inputs } => {
                let per = self.vals(inputs[0]).len();
                for (i, &v) in inputs.iter().enumerate() {
                    self.accumulate(v, &gout[i * per..(i + 1) * per]);
                }
            }
        }
    }
}

/// Plain p x q by q x r product into a fresh buffer.
pub fn matmul_raw<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * r];
    if r == 1 {
        // Matrix-vector: one dot per row.
        for (o, a_row) in out.iter_mut().zip(a.chunks_exact(q)) {
            *o = dot(a_row, b);
        }
        return out;
    }
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let a_ik = a[i * q + k];
            if a_ik == T::zero() {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ik * bv;
            }
        }
    }
    out
}

// Four-lane accumulators break the serial float dependency chain; the
// resulting fixed summation order is part of the determinism contract.

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (a4, a_rem) = a.split_at(a.len() - a.len() % 4);
    let (b4, _) = b.split_at(a4.len());
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] = acc[k] + ca[k] * cb[k];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in a_rem.iter().zip(&b[a4.len()..]) {
        total = total + x * y;
    }
    total
}

fn sum_slice<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (a4, a_rem) = a.split_at(a.len() - a.len() % 4);
    for c in a4.chunks_exact(4) {
        for k in 0..4 {
            acc[k] = acc[k] + c[k];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for &x in a_rem {
        total = total + x;
    }
    total
}

fn axpy<T: Scalar>(out: &mut [T], scale: T, src: &[T]) {
    for (o, &s) in out.iter_mut().zip(src) {
        *o = *o + scale * s;
    }
}

/// Row softmax with per-row max subtraction, written into `out`.
pub fn softmax_rows_raw<T: Scalar>(input: &[T], out: &mut [T], rows: usize, cols: usize) {
    for i in 0..rows {
        let row = &input[i * cols..(i + 1) * cols];
        let out_row = &mut out[i * cols..(i + 1) * cols];
        let mut max4 = [row[0]; 4];
        let (r4, r_rem) = row.split_at(cols - cols % 4);
        for c in r4.chunks_exact(4) {
            for k in 0..4 {
                if c[k] > max4[k] {
                    max4[k] = c[k];
                }
            }
        }
        let mut max = max4[0].max(max4[1]).max(max4[2]).max(max4[3]);
        for &v in r_rem {
            if v > max {
                max = v;
            }
        }
        let mut sum4 = [T::zero(); 4];
        {
            let o4 = out_row[..r4.len()].chunks_exact_mut(4);
            for (co, ci) in o4.zip(r4.chunks_exact(4)) {
                for k in 0..4 {
                    let e = (ci[k] - max).exp();
                    co[k] = e;
                    sum4[k] = sum4[k] + e;
                }
            }
        }
        let mut sum = (sum4[0] + sum4[1]) + (sum4[2] + sum4[3]);
        for (o, &v) in out_row[r4.len()..].iter_mut().zip(r_rem) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for o in out_row.iter_mut() {
            *o = *o * inv;
        }
    }
}
