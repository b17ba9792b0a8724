use std::collections::HashMap;

use rand::Rng as _;

use super::kernels::{col2im, conv_output_extent, gemm, im2col, ConvGeom};
use super::params::{BatchStats, ParamId, ParamStore, RunningStats, BN_EPS};
use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f32,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Log {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    RowMaxMinus {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Sum {
        x: Var,
    },
    ChannelSum {
        x: Var,
    },
    NormalizeMap {
        x: Var,
        std: Vec<f32>,
        eps: f32,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Concat {
        xs: Vec<Var>,
    },
    Nll {
        logp: Var,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in execution order, so every op's inputs precede it and
/// [`Tape::backward`] visits each op once by walking the list backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    params: HashMap<ParamId, Var>,
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(Error::dim(op, "rank", 4, s.len())),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.ndim() != b.ndim() {
        return Err(Error::dim(op, "rank", a.ndim(), b.ndim()));
    }
    for (axis, (x, y)) in a.shape().iter().zip(b.shape()).enumerate() {
        if x != y {
            return Err(Error::dim(op, format!("{axis}"), *x, *y));
        }
    }
    Ok(())
}

/// Split of a tensor into `rows × last` for ops that act on the last axis.
fn last_axis(t: &Tensor) -> (usize, usize) {
    let last = t.shape().last().copied().unwrap_or(1);
    (t.numel() / last, last)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && !matches!(op, Op::Log { .. } | Op::Leaf) {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.all_finite());
            debug_assert!(
                !inputs_finite || value.all_finite(),
                "op #{} produced a non-finite value from finite inputs",
                self.nodes.len()
            );
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Gradient-free copy of `v`; nothing flows back through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Leaf for a stored parameter. Repeated requests return the same node, so
    /// every use of a shared parameter accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Parameters referenced on this tape, in first-use order.
    pub fn param_vars(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<(ParamId, Var)> = self.params.iter().map(|(k, v)| (*k, *v)).collect();
        out.sort_by_key(|(_, v)| *v);
        out
    }

    /// Adds the gradient of every parameter used on this tape into `store`.
    /// Parameters that were used but received no gradient get zeros.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (id, v) in self.param_vars() {
            match self.grad(v) {
                Some(g) => store.accumulate_grad(id, g)?,
                None => {
                    let zeros = vec![0.0; self.value(v).numel()];
                    store.accumulate_grad(id, &zeros)?
                }
            }
        }
        Ok(())
    }

    // ---- convolution and dense layers -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let [n, c_in, h, wd] = dims4(self.value(x), "conv2d")?;
        let [c_out, wc_in, kh, kw] = dims4(self.value(w), "conv2d")?;
        if wc_in != c_in {
            return Err(Error::dim("conv2d", "input channels", wc_in, c_in));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be positive".into()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::dim("conv2d", "bias", c_out, self.value(b).numel()));
            }
        }
        let h_out = conv_output_extent(h, kh, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", "height", kh, h + 2 * padding))?;
        let w_out = conv_output_extent(wd, kw, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", "width", kw, wd + 2 * padding))?;
        let g = ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            h_out,
            w_out,
        };
        let (krows, cols) = (g.col_rows(), g.col_cols());
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; n * c_out * cols];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; krows * cols]
        };
        for s in 0..n {
            let xin = &xs[s * c_in * h * wd..(s + 1) * c_in * h * wd];
            let y = &mut out[s * c_out * cols..(s + 1) * c_out * cols];
            if g.is_pointwise() {
                gemm(c_out, krows, cols, ws, false, xin, false, y, false);
            } else {
                im2col(xin, &g, &mut col);
                gemm(c_out, krows, cols, ws, false, &col, false, y, false);
            }
            if let Some(b) = b {
                for (co, bv) in self.value(b).data().iter().enumerate() {
                    y[co * cols..(co + 1) * cols].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::new(vec![n, c_out, h_out, w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad: padding }, &inputs))
    }

    /// `x · w + b` for `x: N×in`, `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = match self.value(x).shape() {
            &[n, f] => (n, f),
            s => return Err(Error::dim("linear", "rank", 2, s.len())),
        };
        let (win, wout) = match self.value(w).shape() {
            &[i, o] => (i, o),
            s => return Err(Error::dim("linear", "weight rank", 2, s.len())),
        };
        if win != fin {
            return Err(Error::dim("linear", "in_features", win, fin));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [wout] {
                return Err(Error::dim("linear", "bias", wout, self.value(b).numel()));
            }
        }
        let mut out = vec![0.0; n * wout];
        gemm(n, fin, wout, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(wout) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let value = Tensor::new(vec![n, wout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Matrix product of 2-D operands, or batched product of 3-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bat, m, k, n) = self.matmul_dims(a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; bat * m * n];
        for i in 0..bat {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let shape = if self.value(a).ndim() == 2 {
            vec![m, n]
        } else {
            vec![bat, m, n]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
        match (self.value(a).shape(), self.value(b).shape()) {
            (&[m, k], &[k2, n]) => {
                if k != k2 {
                    return Err(Error::dim("matmul", "inner", k, k2));
                }
                Ok((1, m, k, n))
            }
            (&[ba, m, k], &[bb, k2, n]) => {
                if ba != bb {
                    return Err(Error::dim("matmul", "batch", ba, bb));
                }
                if k != k2 {
                    return Err(Error::dim("matmul", "inner", k, k2));
                }
                Ok((ba, m, k, n))
            }
            (sa, sb) => Err(Error::dim("matmul", "rank", sa.len(), sb.len())),
        }
    }

    // ---- elementwise ------------------------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    fn unary(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
            .expect("same shape as input")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let v = self.unary(x, |a| a * c);
        self.push(v, Op::Scale { x, c }, &[x])
    }

    /// Multiplies every element by a one-element tensor `s` (differentiable in both).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::dim("mul_scalar", "scalar numel", 1, sv.numel()));
        }
        let c = sv.data()[0];
        let v = self.unary(x, |a| a * c);
        Ok(self.push(v, Op::MulScalar { x, s }, &[x, s]))
    }

    /// `x[n, c, :, :] * gate[n, c]` for `x: N×C×H×W`, `gate: N×C`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "scale_channels")?;
        if self.value(gate).shape() != [n, c] {
            return Err(Error::dim("scale_channels", "gate", n * c, self.value(gate).numel()));
        }
        let hw = h * w;
        let gv = self.value(gate).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let g = gv[i];
            chunk.iter_mut().for_each(|v| *v *= g);
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::ScaleChannels { x, gate }, &[x, gate]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.unary(x, |a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.unary(x, sigmoid);
        self.push(v, Op::Sigmoid { x }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.unary(x, f32::ln);
        self.push(v, Op::Log { x }, &[x])
    }

    /// Softmax along the last axis, max-shifted for stability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, last) = last_axis(t);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(last) {
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::Softmax { x }, &[x])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, last) = last_axis(t);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(last) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::LogSoftmax { x }, &[x])
    }

    /// `rowmax(x) − x` along the last axis.
    pub fn row_max_minus(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, last) = last_axis(t);
        let mut out = t.data().to_vec();
        let mut argmax = Vec::with_capacity(rows);
        for row in out.chunks_mut(last) {
            let am = super::argmax(row);
            let max = row[am];
            row.iter_mut().for_each(|v| *v = max - *v);
            argmax.push(am);
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::RowMaxMinus { x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape { x }, &[x]))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (bat, r, c) = match t.shape() {
            &[r, c] => (1, r, c),
            &[b, r, c] => (b, r, c),
            s => return Err(Error::dim("transpose", "rank", 3, s.len())),
        };
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..bat {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let shape = if t.ndim() == 2 { vec![c, r] } else { vec![bat, c, r] };
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Transpose { x }, &[x]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Sums an N×C×H×W map over channels, giving N×H×W.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "channel_sum")?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for s in 0..n {
            let dst = &mut out[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let plane = &src[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                dst.iter_mut().zip(plane).for_each(|(d, p)| *d += p);
            }
        }
        let v = Tensor::new(vec![n, h, w], out)?;
        Ok(self.push(v, Op::ChannelSum { x }, &[x]))
    }

    /// Standardizes each sample (leading axis) to zero mean and unit population
    /// std: `(g − mean) / (std + eps)`.
    pub fn normalize_map(&mut self, x: Var, eps: f32) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() < 2 {
            return Err(Error::dim("normalize_map", "rank", 2, t.ndim()));
        }
        let n = t.shape()[0];
        let per = t.numel() / n;
        let mut out = t.data().to_vec();
        let mut stds = Vec::with_capacity(n);
        for row in out.chunks_mut(per) {
            let mean = row.iter().map(|v| *v as f64).sum::<f64>() / per as f64;
            let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
            let std = var.sqrt() as f32;
            let mean = mean as f32;
            let denom = std + eps;
            row.iter_mut().for_each(|v| *v = (*v - mean) / denom);
            stds.push(std);
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(v, Op::NormalizeMap { x, std: stds, eps }, &[x]))
    }

    // ---- normalization, pooling, regularization ---------------------------------------

    /// Batch normalization over N·H·W per channel.
    ///
    /// In training mode the batch statistics are used and returned so the caller
    /// can fold them into `running`; in eval mode `running` is used as is.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        training: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, h, w] = dims4(self.value(x), "batchnorm2d")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim("batchnorm2d", name, c, self.value(v).numel()));
            }
        }
        if running.channels() != c {
            return Err(Error::dim("batchnorm2d", "running stats", c, running.channels()));
        }
        let hw = h * w;
        let m = n * hw;
        let src = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; src.len()];
        if training {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for smp in 0..n {
                    let base = (smp * c + ch) * hw;
                    s += src[base..base + hw].iter().map(|v| *v as f64).sum::<f64>();
                }
                let mu = s / m as f64;
                let mut q = 0.0f64;
                for smp in 0..n {
                    let base = (smp * c + ch) * hw;
                    q += src[base..base + hw].iter().map(|v| (*v as f64 - mu).powi(2)).sum::<f64>();
                }
                mean[ch] = mu as f32;
                var[ch] = (q / m as f64) as f32;
            }
            let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = vec![0.0; src.len()];
            for smp in 0..n {
                for ch in 0..c {
                    let base = (smp * c + ch) * hw;
                    for i in base..base + hw {
                        let xh = (src[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = xh;
                        out[i] = gv[ch] * xh + bv[ch];
                    }
                }
            }
            let bessel = if m > 1 { m as f32 / (m as f32 - 1.0) } else { 1.0 };
            let stats = BatchStats {
                var_unbiased: var.iter().map(|v| v * bessel).collect(),
                mean,
            };
            let value = Tensor::new(vec![n, c, h, w], out)?;
            let op = Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            };
            Ok((self.push(value, op, &[x, gamma, beta]), Some(stats)))
        } else {
            let inv_std: Vec<f32> = running.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            for smp in 0..n {
                for ch in 0..c {
                    let base = (smp * c + ch) * hw;
                    for i in base..base + hw {
                        out[i] = gv[ch] * ((src[i] - running.mean[ch]) * inv_std[ch]) + bv[ch];
                    }
                }
            }
            let value = Tensor::new(vec![n, c, h, w], out)?;
            let op = Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running.mean.clone(),
                inv_std,
            };
            Ok((self.push(value, op, &[x, gamma, beta]), None))
        }
    }

    /// Max pooling with implicit −∞ padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "max_pool2d")?;
        let ho = conv_output_extent(h, kernel, stride, padding)
            .ok_or_else(|| Error::dim("max_pool2d", "height", kernel, h + 2 * padding))?;
        let wo = conv_output_extent(w, kernel, stride, padding)
            .ok_or_else(|| Error::dim("max_pool2d", "width", kernel, w + 2 * padding))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ki in 0..kernel {
                        let ii = (oi * stride + ki) as isize - padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let jj = (oj * stride + kj) as isize - padding as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let idx = base + ii as usize * w + jj as usize;
                            if best_idx == usize::MAX || src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oi) * wo + oj;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let v = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Unpadded average pooling.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "avg_pool2d")?;
        let ho = conv_output_extent(h, kernel, stride, 0)
            .ok_or_else(|| Error::dim("avg_pool2d", "height", kernel, h))?;
        let wo = conv_output_extent(w, kernel, stride, 0)
            .ok_or_else(|| Error::dim("avg_pool2d", "width", kernel, w))?;
        let src = self.value(x).data();
        let inv = 1.0 / (kernel * kernel) as f32;
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut s = 0.0;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            s += src[base + (oi * stride + ki) * w + oj * stride + kj];
                        }
                    }
                    out[(plane * ho + oi) * wo + oj] = s * inv;
                }
            }
        }
        let v = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(v, Op::AvgPool { x, k: kernel, stride }, &[x]))
    }

    /// N×C×H×W → N×C mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "global_avg_pool")?;
        let hw = h * w;
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        let v = Tensor::new(vec![n, c], out)?;
        Ok(self.push(v, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Inverted dropout: in training each element is zeroed with probability `p`
    /// and survivors are scaled by `1/(1−p)`; outside training it returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f32, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f32> = (0..t.numel())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep_scale })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { x, mask }, &[x]))
    }

    /// Concatenates N×Cᵢ×H×W tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Usage("concat_channels needs at least one input".into()))?;
        let [n, _, h, w] = dims4(self.value(first), "concat_channels")?;
        let mut total_c = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = dims4(self.value(v), "concat_channels")?;
            if vn != n {
                return Err(Error::dim("concat_channels", "batch", n, vn));
            }
            if vh != h {
                return Err(Error::dim("concat_channels", "height", h, vh));
            }
            if vw != w {
                return Err(Error::dim("concat_channels", "width", w, vw));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, xs))
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let (n, m) = match self.value(logp).shape() {
            &[n, m] => (n, m),
            s => return Err(Error::dim("nll", "rank", 2, s.len())),
        };
        if labels.len() != n {
            return Err(Error::dim("nll", "batch", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
            return Err(Error::Data(format!("label {bad} out of range for {m} classes")));
        }
        let lp = self.value(logp).data();
        let total: f32 = labels.iter().enumerate().map(|(i, &y)| -lp[i * m + y]).sum();
        let v = Tensor::scalar(total / n as f32);
        Ok(self.push(
            v,
            Op::Nll {
                logp,
                labels: labels.to_vec(),
            },
            &[logp],
        ))
    }

    // ---- reverse pass -----------------------------------------------------------------

    /// Back-propagates from a one-element `loss`, replacing gradients from any earlier call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        // Gradient buffer of an input, or None when the input needs no gradient.
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let y = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let [n, c_in, h, wd] = dims4(&nodes[x.0].value, "conv2d").expect("checked in forward");
                let [c_out, _, kh, kw] = dims4(&nodes[w.0].value, "conv2d").expect("checked in forward");
                let [_, _, h_out, w_out] = dims4(&nodes[i].value, "conv2d").expect("checked in forward");
                let g = ConvGeom {
                    c_in,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    h_out,
                    w_out,
                };
                let (krows, cols) = (g.col_rows(), g.col_cols());
                let xs = val(*x);
                let ws = val(*w);
                if let Some(db) = b.and_then(|v| grad_slot(nodes, grads, v)) {
                    for s in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let base = (s * c_out + co) * cols;
                            *d += dy[base..base + cols].iter().sum::<f32>();
                        }
                    }
                }
                let mut col = vec![0.0; krows * cols];
                if let Some(dw) = slot!(*w) {
                    for s in 0..n {
                        let xin = &xs[s * c_in * h * wd..(s + 1) * c_in * h * wd];
                        let dys = &dy[s * c_out * cols..(s + 1) * c_out * cols];
                        let colref: &[f32] = if g.is_pointwise() {
                            xin
                        } else {
                            im2col(xin, &g, &mut col);
                            &col
                        };
                        gemm(c_out, cols, krows, dys, false, colref, true, dw, true);
                    }
                }
                if let Some(dx) = slot!(*x) {
                    for s in 0..n {
                        let dys = &dy[s * c_out * cols..(s + 1) * c_out * cols];
                        let dxs = &mut dx[s * c_in * h * wd..(s + 1) * c_in * h * wd];
                        if g.is_pointwise() {
                            gemm(krows, c_out, cols, ws, true, dys, false, dxs, true);
                        } else {
                            gemm(krows, c_out, cols, ws, true, dys, false, &mut col, false);
                            col2im(&col, &g, dxs);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let fout = nodes[w.0].value.shape()[1];
                if let Some(db) = b.and_then(|v| grad_slot(nodes, grads, v)) {
                    for row in dy.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
                let xs = val(*x);
                if let Some(dw) = slot!(*w) {
                    gemm(fin, n, fout, xs, true, dy, false, dw, true);
                }
                let ws = val(*w);
                if let Some(dx) = slot!(*x) {
                    gemm(n, fout, fin, dy, false, ws, true, dx, true);
                }
            }
            Op::MatMul { a, b } => {
                let (bat, m, k, n) = self.matmul_dims(*a, *b).expect("checked in forward");
                let av = val(*a);
                let bv = val(*b);
                if let Some(da) = slot!(*a) {
                    for t in 0..bat {
                        gemm(
                            m,
                            n,
                            k,
                            &dy[t * m * n..(t + 1) * m * n],
                            false,
                            &bv[t * k * n..(t + 1) * k * n],
                            true,
                            &mut da[t * m * k..(t + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(db) = slot!(*b) {
                    for t in 0..bat {
                        gemm(
                            k,
                            m,
                            n,
                            &av[t * m * k..(t + 1) * m * k],
                            true,
                            &dy[t * m * n..(t + 1) * m * n],
                            false,
                            &mut db[t * k * n..(t + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = slot!(*a) {
                    da.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot!(*b) {
                    db.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = slot!(*a) {
                    da.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot!(*b) {
                    db.iter_mut().zip(dy).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = slot!(*a) {
                    for ((d, g), o) in da.iter_mut().zip(dy).zip(bv) {
                        *d += g * o;
                    }
                }
                if let Some(db) = slot!(*b) {
                    for ((d, g), o) in db.iter_mut().zip(dy).zip(av) {
                        *d += g * o;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = val(*s)[0];
                let xv = val(*x);
                if let Some(ds) = slot!(*s) {
                    ds[0] += dy.iter().zip(xv).map(|(g, v)| g * v).sum::<f32>();
                }
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g * sv);
                }
            }
            Op::ScaleChannels { x, gate } => {
                let shape = nodes[x.0].value.shape();
                let hw = shape[2] * shape[3];
                let (xv, gv) = (val(*x), val(*gate));
                if let Some(dg) = slot!(*gate) {
                    for (k, d) in dg.iter_mut().enumerate() {
                        let r = k * hw..(k + 1) * hw;
                        *d += dy[r.clone()].iter().zip(&xv[r]).map(|(g, v)| g * v).sum::<f32>();
                    }
                }
                if let Some(dx) = slot!(*x) {
                    for (k, chunk) in dx.chunks_mut(hw).enumerate() {
                        let gk = gv[k];
                        for (d, g) in chunk.iter_mut().zip(&dy[k * hw..(k + 1) * hw]) {
                            *d += g * gk;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = val(*x);
                if let Some(dx) = slot!(*x) {
                    for ((d, g), v) in dx.iter_mut().zip(dy).zip(xv) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(dx) = slot!(*x) {
                    for ((d, g), s) in dx.iter_mut().zip(dy).zip(y) {
                        *d += g * s * (1.0 - s);
                    }
                }
            }
            Op::Log { x } => {
                let xv = val(*x);
                if let Some(dx) = slot!(*x) {
                    for ((d, g), v) in dx.iter_mut().zip(dy).zip(xv) {
                        *d += g / v;
                    }
                }
            }
            Op::Softmax { x } => {
                let (_, last) = last_axis(&nodes[i].value);
                if let Some(dx) = slot!(*x) {
                    for ((d, g), p) in dx.chunks_mut(last).zip(dy.chunks(last)).zip(y.chunks(last)) {
                        let dot: f32 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                        for k in 0..last {
                            d[k] += p[k] * (g[k] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let (_, last) = last_axis(&nodes[i].value);
                if let Some(dx) = slot!(*x) {
                    for ((d, g), lp) in dx.chunks_mut(last).zip(dy.chunks(last)).zip(y.chunks(last)) {
                        let gsum: f32 = g.iter().sum();
                        for k in 0..last {
                            d[k] += g[k] - lp[k].exp() * gsum;
                        }
                    }
                }
            }
            Op::RowMaxMinus { x, argmax } => {
                let (_, last) = last_axis(&nodes[i].value);
                if let Some(dx) = slot!(*x) {
                    for ((d, g), am) in dx.chunks_mut(last).zip(dy.chunks(last)).zip(argmax) {
                        let gsum: f32 = g.iter().sum();
                        for k in 0..last {
                            d[k] -= g[k];
                        }
                        d[*am] += gsum;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
            }
            Op::Transpose { x } => {
                let shape = nodes[x.0].value.shape();
                let (bat, r, c) = match *shape {
                    [r, c] => (1, r, c),
                    [b, r, c] => (b, r, c),
                    _ => unreachable!("checked in forward"),
                };
                if let Some(dx) = slot!(*x) {
                    for b in 0..bat {
                        let base = b * r * c;
                        for ii in 0..r {
                            for jj in 0..c {
                                dx[base + ii * c + jj] += dy[base + jj * r + ii];
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = slot!(*x) {
                    let g = dy[0];
                    dx.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::ChannelSum { x } => {
                let [n, c, h, w] = dims4(&nodes[x.0].value, "channel_sum").expect("checked");
                let hw = h * w;
                if let Some(dx) = slot!(*x) {
                    for s in 0..n {
                        let g = &dy[s * hw..(s + 1) * hw];
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            dx[base..base + hw].iter_mut().zip(g).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::NormalizeMap { x, std, eps } => {
                let n = nodes[x.0].value.shape()[0];
                let per = nodes[x.0].value.numel() / n;
                if let Some(dx) = slot!(*x) {
                    for s in 0..n {
                        let r = s * per..(s + 1) * per;
                        let (g, yy) = (&dy[r.clone()], &y[r.clone()]);
                        let sd = std[s];
                        let denom = sd + eps;
                        let gmean = g.iter().sum::<f32>() / per as f32;
                        // Σ g·d with d = y·denom the centred input.
                        let gd: f32 = g.iter().zip(yy).map(|(a, b)| a * b).sum::<f32>() * denom;
                        let coef = if sd > 0.0 {
                            gd / (per as f32 * sd * denom * denom)
                        } else {
                            0.0
                        };
                        for (k, d) in dx[r].iter_mut().enumerate() {
                            let centred = yy[k] * denom;
                            *d += (g[k] - gmean) / denom - coef * centred;
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = dims4(&nodes[x.0].value, "batchnorm2d").expect("checked");
                let hw = h * w;
                let m = (n * hw) as f32;
                let gv = val(*gamma);
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for k in base..base + hw {
                            sum_dy[ch] += dy[k];
                            sum_dy_xhat[ch] += dy[k] * xhat[k];
                        }
                    }
                }
                if let Some(dg) = slot!(*gamma) {
                    dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, v)| *d += v);
                }
                if let Some(db) = slot!(*beta) {
                    db.iter_mut().zip(&sum_dy).for_each(|(d, v)| *d += v);
                }
                if let Some(dx) = slot!(*x) {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k1 = gv[ch] * inv_std[ch] / m;
                            for k in base..base + hw {
                                dx[k] += k1 * (m * dy[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let [n, c, h, w] = dims4(&nodes[x.0].value, "batchnorm2d").expect("checked");
                let hw = h * w;
                let xv = val(*x);
                let gv = val(*gamma);
                if let Some(dg) = slot!(*gamma) {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for k in base..base + hw {
                                dg[ch] += dy[k] * (xv[k] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                }
                if let Some(db) = slot!(*beta) {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            db[ch] += dy[base..base + hw].iter().sum::<f32>();
                        }
                    }
                }
                if let Some(dx) = slot!(*x) {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k1 = gv[ch] * inv_std[ch];
                            for k in base..base + hw {
                                dx[k] += dy[k] * k1;
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = slot!(*x) {
                    for (g, &idx) in dy.iter().zip(argmax) {
                        dx[idx] += g;
                    }
                }
            }
            Op::AvgPool { x, k, stride } => {
                let [n, c, h, w] = dims4(&nodes[x.0].value, "avg_pool2d").expect("checked");
                let [_, _, ho, wo] = dims4(&nodes[i].value, "avg_pool2d").expect("checked");
                let inv = 1.0 / (k * k) as f32;
                if let Some(dx) = slot!(*x) {
                    for plane in 0..n * c {
                        let base = plane * h * w;
                        for oi in 0..ho {
                            for oj in 0..wo {
                                let g = dy[(plane * ho + oi) * wo + oj] * inv;
                                for ki in 0..*k {
                                    for kj in 0..*k {
                                        dx[base + (oi * stride + ki) * w + oj * stride + kj] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = dims4(&nodes[x.0].value, "global_avg_pool").expect("checked");
                let hw = h * w;
                if let Some(dx) = slot!(*x) {
                    for (chunk, g) in dx.chunks_mut(hw).zip(dy) {
                        let v = g / hw as f32;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = slot!(*x) {
                    for ((d, g), m) in dx.iter_mut().zip(dy).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::Concat { xs } => {
                let [n, total_c, h, w] = dims4(&nodes[i].value, "concat_channels").expect("checked");
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = nodes[v.0].value.shape()[1];
                    if let Some(dx) = slot!(v) {
                        for s in 0..n {
                            let src = &dy[(s * total_c + offset) * hw..(s * total_c + offset + c) * hw];
                            dx[s * c * hw..(s + 1) * c * hw]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += c;
                }
            }
            Op::Nll { logp, labels } => {
                let m = nodes[logp.0].value.shape()[1];
                let scale = dy[0] / labels.len() as f32;
                if let Some(dl) = slot!(*logp) {
                    for (r, &yl) in labels.iter().enumerate() {
                        dl[r * m + yl] -= scale;
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place max-shifted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
