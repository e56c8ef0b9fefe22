//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive in execution order. Each recorded node
//! owns its forward value plus whatever auxiliary data its backward rule
//! needs. [`Graph::backward`] walks the tape in exact reverse order, so the
//! tape is acyclic by construction. One training step owns one graph.

use super::attention;
use super::batch_renorm::{batch_renorm, NormMode, RenormLimits};
use super::linalg::{gemm, View, ViewMut};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Glu(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 2],
        pad: [usize; 2],
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Rotary {
        x: Var,
        heads: usize,
        theta: f64,
        offset: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        chunk: usize,
        lse: Vec<f64>,
    },
    BatchRenorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
        r: Vec<f64>,
        d: Vec<f64>,
        training: bool,
    },
    /// Scalar computed outside the tape with a known gradient w.r.t. `x`.
    External {
        x: Var,
        grad: Tensor,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Updated running `(mean, var)` of a batch-renorm call.
pub type RunningStats = (Vec<f64>, Vec<f64>);

/// Recording of a forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Per-axis conv output length: `ceil(len / stride)` with implicit zero padding.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    // ---- primitives ---------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = super::linalg::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    /// Adds a `[n]` bias to every row of a `[..., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddBias(x, bias), rg, "add_bias")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg, "scale")
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg, "softmax")
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg, "log_softmax")
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.numel() / n;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normed = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for (r, row) in xv.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                normed[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg, "silu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(out, Op::Log(x), rg, "log")
    }

    /// Gated linear unit over the trailing axis: `a * sigmoid(b)` with `[a | b]` halves.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n2 = xv.cols();
        if !n2.is_multiple_of(2) {
            return Err(Error::shape("glu", xv.shape(), &[n2 / 2 * 2]));
        }
        let n = n2 / 2;
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        let data = xv
            .data()
            .chunks(n2)
            .flat_map(|row| (0..n).map(move |j| row[j] * sigmoid(row[n + j])))
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data)?, Op::Glu(x), rg, "glu")
    }

    /// Depthwise 1-D convolution along time: `x [T,C]`, `w [C,K]`, `b [C]`, zero padding `pad` on both sides.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sw[0] != sx[1] || self.shape(b) != [sx[1]] {
            return Err(Error::shape("conv1d_depthwise", sx, sw));
        }
        let (t, c, k) = (sx[0], sx[1], sw[1]);
        if t + 2 * pad < k {
            return Err(Error::shape("conv1d_depthwise", sx, sw));
        }
        let t_out = t + 2 * pad + 1 - k;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; t_out * c];
        for o in 0..t_out {
            let row = &mut out[o * c..(o + 1) * c];
            row.copy_from_slice(bd);
            for j in 0..k {
                let src = o + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xr = &xd[(src - pad) * c..(src - pad + 1) * c];
                for ch in 0..c {
                    row[ch] += wd[ch * k + j] * xr[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::new(vec![t_out, c], out)?,
            Op::Conv1d { x, w, b, pad },
            rg,
            "conv1d_depthwise",
        )
    }

    /// Depthwise 2-D convolution over `x [H,W,C]` with `w [C,KH,KW]`, `b [C]`.
    ///
    /// Output is `[ceil(H/sh), ceil(W/sw), C]`; output `(o1,o2)` reads input
    /// `(o1*sh - ph + i, o2*sw - pw + j)`, with out-of-range positions as zero.
    pub fn conv2d_depthwise(&mut self, x: Var, w: Var, b: Var, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sw[0] != sx[2] || self.shape(b) != [sx[2]] {
            return Err(Error::shape("conv2d_depthwise", sx, sw));
        }
        let (h, wi, c) = (sx[0], sx[1], sx[2]);
        let (kh, kw) = (sw[1], sw[2]);
        let (ho, wo) = (conv_out_len(h, stride[0]), conv_out_len(wi, stride[1]));
        let xd = self.value(x).data();
        let bd = self.value(b).data();
        // [KH, KW, C] so the channel loop is contiguous.
        let wt = transpose_kernel(self.value(w).data(), c, kh, kw);
        let mut out = vec![0.0; ho * wo * c];
        for o1 in 0..ho {
            for o2 in 0..wo {
                out[(o1 * wo + o2) * c..(o1 * wo + o2 + 1) * c].copy_from_slice(bd);
            }
            for i in 0..kh {
                let Some(r) = (o1 * stride[0] + i).checked_sub(pad[0]).filter(|&r| r < h) else {
                    continue;
                };
                for o2 in 0..wo {
                    let orow = (o1 * wo + o2) * c;
                    for j in 0..kw {
                        let Some(col) = (o2 * stride[1] + j).checked_sub(pad[1]).filter(|&q| q < wi) else {
                            continue;
                        };
                        let xrow = (r * wi + col) * c;
                        let wrow = (i * kw + j) * c;
                        for ch in 0..c {
                            out[orow + ch] += wt[wrow + ch] * xd[xrow + ch];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::new(vec![ho, wo, c], out)?,
            Op::Conv2d { x, w, b, stride, pad },
            rg,
            "conv2d_depthwise",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&xd[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(x);
        self.push(Tensor::new(out_shape, data)?, Op::Slice { x, axis, start }, rg, "slice")
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?)
            .to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && axis < s.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                data.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Rotary position encoding applied per head to `x [T, d]`; row `t` sits at position `offset + t`.
    pub fn rotary(&mut self, x: Var, heads: usize, theta: f64, offset: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || heads == 0 || !shape[1].is_multiple_of(heads) || !(shape[1] / heads).is_multiple_of(2) {
            return Err(Error::shape("rotary", &shape, &[heads]));
        }
        let mut out = self.value(x).clone();
        rotate_rows(out.data_mut(), shape[1], heads, theta, offset, 1.0);
        let rg = self.rg(x);
        self.push(
            out,
            Op::Rotary {
                x,
                heads,
                theta,
                offset,
            },
            rg,
            "rotary",
        )
    }

    /// Multi-head attention via the chunked kernel.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64, chunk: usize) -> Result<Var> {
        let (out, lse) = attention::chunked_forward(self.value(q), self.value(k), self.value(v), heads, scale, chunk)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                chunk,
                lse,
            },
            rg,
            "attention",
        )
    }

    /// Batch renormalization of `x [T, C]`; returns updated running
    /// `(mean, var)` in training mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_renorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        limits: RenormLimits,
        mode: NormMode,
    ) -> Result<(Var, Option<RunningStats>)> {
        let fwd = batch_renorm(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            limits,
            mode,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = fwd.new_mean.zip(fwd.new_var);
        let var = self.push(
            fwd.output,
            Op::BatchRenorm {
                x,
                gamma,
                beta,
                normed: fwd.normed,
                inv_std: fwd.inv_std,
                r: fwd.r,
                d: fwd.d,
                training: mode == NormMode::Training,
            },
            rg,
            "batch_renorm",
        )?;
        Ok((var, stats))
    }

    /// Records a scalar computed outside the tape whose gradient w.r.t. `x` is known.
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape("external_scalar", self.shape(x), grad.shape()));
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(value), Op::External { x, grad }, rg, "external_scalar")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    // ---- composites ---------------------------------------------------

    /// `x w + b` for `x [m,k]`, `w [k,n]`, `b [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Depthwise 2-D conv followed by a pointwise (1×1) projection `pw [C_in, C_out]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_depthwise_separable(
        &mut self,
        x: Var,
        dw: Var,
        dw_b: Var,
        pw: Var,
        pw_b: Var,
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var> {
        let y = self.conv2d_depthwise(x, dw, dw_b, stride, pad)?;
        let s = self.shape(y).to_vec();
        let flat = self.reshape(y, &[s[0] * s[1], s[2]])?;
        let z = self.linear(flat, pw, pw_b)?;
        let c_out = self.shape(z)[1];
        self.reshape(z, &[s[0], s[1], c_out])
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients of leaves are kept;
    /// intermediate gradients are released as soon as they are consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        1.0,
                        View::rm(g.data(), 0, m, n, n),
                        View::rm(bv.data(), 0, k, n, n).t(),
                        0.0,
                        ViewMut::rm(&mut da, 0, m, k, k),
                    );
                    accumulate(grads, *a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        1.0,
                        View::rm(av.data(), 0, m, k, k).t(),
                        View::rm(g.data(), 0, m, n, n),
                        0.0,
                        ViewMut::rm(&mut db, 0, k, n, n),
                    );
                    accumulate(grads, *b, Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddBias(x, bias) => {
                if rg(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, Tensor::new(vec![n], db).expect("shape"));
                }
                if rg(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
                if rg(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::Scale(x, c) => {
                let mut g = g;
                g.scale_assign(*c);
                accumulate(grads, *x, g);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = g;
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (d, yv) in drow.iter_mut().zip(yrow) {
                        *d = yv * (*d - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = g;
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let total: f64 = drow.iter().sum();
                    for (d, yv) in drow.iter_mut().zip(yrow) {
                        *d -= yv.exp() * total;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let n = g.cols();
                let gm = val(*gamma).data();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (grow, hrow) in g.data().chunks(n).zip(normed.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    if rg(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(vec![n], dg).expect("shape"));
                    }
                    if rg(*beta) {
                        accumulate(grads, *beta, Tensor::new(vec![n], db).expect("shape"));
                    }
                }
                if rg(*x) {
                    let mut dx = vec![0.0; g.numel()];
                    for (r, (grow, hrow)) in g.data().chunks(n).zip(normed.chunks(n)).enumerate() {
                        let dh: Vec<f64> = (0..n).map(|j| grow[j] * gm[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::Silu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Exp(x) => {
                let d = g.data().iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Log(x) => {
                let d = g.data().iter().zip(val(*x).data()).map(|(g, v)| g / v).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Glu(x) => {
                let xv = val(*x);
                let n2 = xv.cols();
                let n = n2 / 2;
                let mut dx = vec![0.0; xv.numel()];
                for (r, (xrow, grow)) in xv.data().chunks(n2).zip(g.data().chunks(n)).enumerate() {
                    for j in 0..n {
                        let s = sigmoid(xrow[n + j]);
                        dx[r * n2 + j] = grow[j] * s;
                        dx[r * n2 + n + j] = grow[j] * xrow[j] * s * (1.0 - s);
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::Conv1d { x, w, b, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let (t, c, k) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                let t_out = g.shape()[0];
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                let mut dx = vec![0.0; t * c];
                let mut dw = vec![0.0; c * k];
                for o in 0..t_out {
                    let grow = &gd[o * c..(o + 1) * c];
                    for j in 0..k {
                        let src = o + j;
                        if src < *pad || src - pad >= t {
                            continue;
                        }
                        let r = src - pad;
                        for ch in 0..c {
                            dx[r * c + ch] += wd[ch * k + j] * grow[ch];
                            dw[ch * k + j] += xd[r * c + ch] * grow[ch];
                        }
                    }
                }
                if rg(*b) {
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![c], db).expect("shape"));
                }
                if rg(*w) {
                    accumulate(grads, *w, Tensor::new(vec![c, k], dw).expect("shape"));
                }
                if rg(*x) {
                    accumulate(grads, *x, Tensor::new(vec![t, c], dx).expect("shape"));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let (h, wi, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (kh, kw) = (wv.shape()[1], wv.shape()[2]);
                let (ho, wo) = (g.shape()[0], g.shape()[1]);
                let wt = transpose_kernel(wv.data(), c, kh, kw);
                let (xd, gd) = (xv.data(), g.data());
                let mut dx = vec![0.0; h * wi * c];
                let mut dwt = vec![0.0; kh * kw * c];
                for o1 in 0..ho {
                    for i in 0..kh {
                        let Some(r) = (o1 * stride[0] + i).checked_sub(pad[0]).filter(|&r| r < h) else {
                            continue;
                        };
                        for o2 in 0..wo {
                            let grow = (o1 * wo + o2) * c;
                            for j in 0..kw {
                                let Some(col) = (o2 * stride[1] + j).checked_sub(pad[1]).filter(|&q| q < wi) else {
                                    continue;
                                };
                                let xrow = (r * wi + col) * c;
                                let wrow = (i * kw + j) * c;
                                for ch in 0..c {
                                    dx[xrow + ch] += wt[wrow + ch] * gd[grow + ch];
                                    dwt[wrow + ch] += xd[xrow + ch] * gd[grow + ch];
                                }
                            }
                        }
                    }
                }
                if rg(*b) {
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![c], db).expect("shape"));
                }
                if rg(*w) {
                    let mut dw = vec![0.0; c * kh * kw];
                    for i in 0..kh {
                        for j in 0..kw {
                            for ch in 0..c {
                                dw[(ch * kh + i) * kw + j] = dwt[(i * kw + j) * c + ch];
                            }
                        }
                    }
                    accumulate(grads, *w, Tensor::new(vec![c, kh, kw], dw).expect("shape"));
                }
                if rg(*x) {
                    accumulate(grads, *x, Tensor::new(vec![h, wi, c], dx).expect("shape"));
                }
            }
            Op::Reshape(x) => {
                let g = g.reshape(val(*x).shape()).expect("reshape back");
                accumulate(grads, *x, g);
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, len, inner) = split_axis(xs, *axis);
                let glen = g.shape()[*axis];
                let mut dx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    dx[dst..dst + glen * inner].copy_from_slice(&g.data()[o * glen * inner..(o + 1) * glen * inner]);
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), dx).expect("shape"));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let len = ps[*axis];
                    if rg(p) {
                        let mut dp = Vec::with_capacity(val(p).numel());
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            dp.extend_from_slice(&g.data()[src..src + len * inner]);
                        }
                        accumulate(grads, p, Tensor::new(ps.to_vec(), dp).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::Rotary {
                x,
                heads,
                theta,
                offset,
            } => {
                let mut dx = g;
                let d = dx.cols();
                rotate_rows(dx.data_mut(), d, *heads, *theta, *offset, -1.0);
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                chunk,
                lse,
            } => {
                let (dq, dk, dv) = attention::chunked_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    &node.value,
                    lse,
                    &g,
                    *heads,
                    *scale,
                    *chunk,
                );
                if rg(*q) {
                    accumulate(grads, *q, dq);
                }
                if rg(*k) {
                    accumulate(grads, *k, dk);
                }
                if rg(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::BatchRenorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
                r,
                d,
                training,
            } => {
                let c = g.cols();
                let t = g.numel() / c;
                let gm = val(*gamma).data();
                let gd = g.data();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..t {
                        for ch in 0..c {
                            dg[ch] += gd[i * c + ch] * (normed[i * c + ch] * r[ch] + d[ch]);
                            db[ch] += gd[i * c + ch];
                        }
                    }
                    if rg(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(vec![c], dg).expect("shape"));
                    }
                    if rg(*beta) {
                        accumulate(grads, *beta, Tensor::new(vec![c], db).expect("shape"));
                    }
                }
                if rg(*x) {
                    let mut dx = vec![0.0; t * c];
                    if *training {
                        // r and d are held constant; gradient flows through the batch moments.
                        let mut mean_dn = vec![0.0; c];
                        let mut mean_dnn = vec![0.0; c];
                        for i in 0..t {
                            for ch in 0..c {
                                let dn = gd[i * c + ch] * gm[ch] * r[ch];
                                mean_dn[ch] += dn / t as f64;
                                mean_dnn[ch] += dn * normed[i * c + ch] / t as f64;
                            }
                        }
                        for i in 0..t {
                            for ch in 0..c {
                                let dn = gd[i * c + ch] * gm[ch] * r[ch];
                                dx[i * c + ch] = inv_std[ch] * (dn - mean_dn[ch] - normed[i * c + ch] * mean_dnn[ch]);
                            }
                        }
                    } else {
                        for i in 0..t {
                            for ch in 0..c {
                                dx[i * c + ch] = gd[i * c + ch] * gm[ch] * inv_std[ch];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(vec![t, c], dx).expect("shape"));
                }
            }
            Op::External { x, grad } => {
                let mut dx = grad.clone();
                dx.scale_assign(g.item());
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gx = Tensor::full(val(*x).shape(), g.item());
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn transpose_kernel(w: &[f64], c: usize, kh: usize, kw: usize) -> Vec<f64> {
    let mut wt = vec![0.0; c * kh * kw];
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                wt[(i * kw + j) * c + ch] = w[(ch * kh + i) * kw + j];
            }
        }
    }
    wt
}

/// Rotates interleaved pairs `(x_2i, x_2i+1)` of every head by `sign * pos * theta^(-2i/d_head)`.
pub(crate) fn rotate_rows(data: &mut [f64], d: usize, heads: usize, theta: f64, offset: usize, sign: f64) {
    let dh = d / heads;
    let freqs: Vec<f64> = (0..dh / 2).map(|i| theta.powf(-2.0 * i as f64 / dh as f64)).collect();
    for (t, row) in data.chunks_mut(d).enumerate() {
        let pos = (offset + t) as f64;
        for (i, f) in freqs.iter().enumerate() {
            let (sin, cos) = (sign * pos * f).sin_cos();
            for h in 0..heads {
                let base = h * dh + 2 * i;
                let (a, b) = (row[base], row[base + 1]);
                row[base] = a * cos - b * sin;
                row[base + 1] = a * sin + b * cos;
            }
        }
    }
}
