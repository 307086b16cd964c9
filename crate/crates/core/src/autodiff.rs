//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and
//! `backward` is a single reverse sweep. Nodes whose inputs do not require a
//! gradient are stored as constants and save nothing for the backward pass.
//!
//! Surrogate gradients are ordinary tape citizens: [`Tape::register_custom_grad`]
//! pairs an elementwise forward function with the derivative rule the backward
//! pass should use instead of the true one.

use std::fmt;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::im2col::{col2im, im2col, ConvGeom};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a registered custom-gradient operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CustomOpId(usize);

pub type ElementFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Elementwise forward function paired with a surrogate local derivative.
#[derive(Clone)]
pub struct CustomGrad {
    pub name: &'static str,
    pub forward: ElementFn,
    pub surrogate: ElementFn,
}

impl fmt::Debug for CustomGrad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomGrad").field("name", &self.name).finish()
    }
}

impl CustomGrad {
    pub fn new(
        name: &'static str,
        forward: impl Fn(f64) -> f64 + Send + Sync + 'static,
        surrogate: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            forward: Arc::new(forward),
            surrogate: Arc::new(surrogate),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, batch: usize, h: usize, wd: usize, plane: usize, cols: Vec<f64> },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var, features: usize },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sin { x: Var },
    Relu { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    MeanAbsRows { x: Var, row_len: usize },
    MeanAbs { x: Var },
    ScaleChannels { x: Var, s: Var, channels: usize, inner: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, channels: usize, inner: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Affine { x: Var, gamma: Var, beta: Var, channels: usize, inner: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Custom { x: Var, id: CustomOpId },
    GlobalAvgPool { x: Var, inner: usize },
    Reshape { x: Var },
    SoftmaxCrossEntropy { logits: Var, classes: usize, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    retained: Vec<bool>,
    custom: Vec<CustomGrad>,
    consumed: bool,
}

fn finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// `(channels, inner)` for a tensor laid out `[N, C, ...]`.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], numel(&shape[2..])))
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

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, needs_grad: bool, op: Op, name: &'static str) -> Result<Var> {
        finite(name, &value)?;
        debug_assert_eq!(value.len(), numel(&shape));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            needs_grad,
            op,
        });
        self.grads.push(None);
        self.retained.push(false);
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes keep shape and data consistent")
    }

    /// Keeps the gradient of an intermediate node after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.retained[v.0] = true;
    }

    /// Gradient of the last `backward` loss with respect to a leaf or a
    /// retained node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Records a tensor as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad(), Op::Leaf, "leaf")
    }

    pub fn input(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(shape_err("input", format!("shape {:?} vs {} values", shape, data.len())));
        }
        self.push(data, shape, requires_grad, Op::Leaf, "input")
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf, "constant")
    }

    /// Registers an elementwise op whose backward pass uses `surrogate` in
    /// place of the true derivative of `forward`.
    pub fn register_custom_grad(&mut self, op: CustomGrad) -> CustomOpId {
        self.custom.push(op);
        CustomOpId(self.custom.len() - 1)
    }

    pub fn custom(&mut self, id: CustomOpId, x: Var) -> Result<Var> {
        let op = self
            .custom
            .get(id.0)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown custom op {:?}", id)))?;
        let f = op.forward.clone();
        let name = op.name;
        let value: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(value, shape, ng, Op::Custom { x, id }, name)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, vec![m, n], ng, Op::MatMul { a, b, m, k, n }, "matmul")
    }

    /// `x[m,k] x w[n,k]^T -> [m,n]`, the dense-layer product.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", format!("{:?} x {:?}^T", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a), self.value(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, vec![m, n], ng, Op::MatMulNT { a, b, m, k, n }, "matmul_nt")
    }

    /// NCHW convolution, `x[N,C,H,W]` with `w[O,C,K,K]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", format!("input {:?}, kernel {:?}", sx, sw)));
        }
        let geom = ConvGeom::new(sx[1], sw[0], sw[2], stride, pad);
        let (batch, h, wd) = (sx[0], sx[2], sx[3]);
        let (oh, ow) = geom.output_hw(h, wd)?;
        let plane = oh * ow;
        let ck = geom.patch_len();
        let o = geom.out_channels;
        let ng = self.needs(x) || self.needs(w);

        let mut out = vec![0.0; batch * o * plane];
        let mut cols = vec![0.0; if ng { batch * ck * plane } else { ck * plane }];
        let img_len = sx[1] * h * wd;
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for n in 0..batch {
                let c = if ng { &mut cols[n * ck * plane..(n + 1) * ck * plane] } else { &mut cols[..] };
                im2col(&xv[n * img_len..(n + 1) * img_len], h, wd, &geom, 0.0, c);
                gemm_nn(o, ck, plane, wv, c, &mut out[n * o * plane..(n + 1) * o * plane]);
            }
        }
        let op = Op::Conv2d {
            x,
            w,
            geom,
            batch,
            h,
            wd,
            plane,
            cols: if ng { cols } else { Vec::new() },
        };
        self.push(out, vec![batch, o, oh, ow], ng, op, "conv2d")
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, ng, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, ng, Op::Mul { a, b }, "mul")
    }

    /// `x[N,F] + bias[F]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", sx, sb)));
        }
        let features = sx[1];
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % features])
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, ng, Op::AddBias { x, bias, features }, "add_bias")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, ng, Op::Scale { x, c }, "scale")
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.sin()).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, ng, Op::Sin { x }, "sin")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, ng, Op::Relu { x }, "relu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![s], Vec::new(), ng, Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err("mean", "empty input"));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(x);
        self.push(vec![s], Vec::new(), ng, Op::Mean { x }, "mean")
    }

    /// Mean of `|x|` over each leading-axis slice: `[O, ...] -> [O]`.
    pub fn mean_abs_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || numel(&shape) == 0 {
            return Err(shape_err("mean_abs_rows", format!("shape {:?}", shape)));
        }
        let rows = shape[0];
        let row_len = numel(&shape[1..]);
        let out = self
            .value(x)
            .chunks(row_len)
            .map(crate::quantization::mean_abs)
            .collect();
        let ng = self.needs(x);
        self.push(out, vec![rows], ng, Op::MeanAbsRows { x, row_len }, "mean_abs_rows")
    }

    /// Mean of `|x|` over the whole tensor, shape `[1]`.
    pub fn mean_abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err("mean_abs", "empty input"));
        }
        let s = crate::quantization::mean_abs(v);
        let ng = self.needs(x);
        self.push(vec![s], vec![1], ng, Op::MeanAbs { x }, "mean_abs")
    }

    /// Multiplies channel `c` (axis 1) of `x[N,C,...]` by `s[c]`; `s` may also hold a single value.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, channels, inner) =
            channel_layout(&shape).ok_or_else(|| shape_err("scale_channels", format!("input {:?}", shape)))?;
        let slen = self.value(s).len();
        if slen != channels && slen != 1 {
            return Err(shape_err("scale_channels", format!("{} scales for {} channels", slen, channels)));
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[if slen == 1 { 0 } else { (i / inner) % channels }])
            .collect();
        let ng = self.needs(x) || self.needs(s);
        self.push(out, shape, ng, Op::ScaleChannels { x, s, channels, inner }, "scale_channels")
    }

    /// Training-mode batch normalization over every axis but 1.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        let (batch, channels, inner) =
            channel_layout(&shape).ok_or_else(|| shape_err("batch_norm", format!("input {:?}", shape)))?;
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            return Err(shape_err("batch_norm", format!("affine params must have {} entries", channels)));
        }
        let count = (batch * inner) as f64;
        let xv = self.value(x);
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * inner;
                mean[c] += xv[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * inner;
                var[c] += xv[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, v) in xv.iter().enumerate() {
            let c = (i / inner) % channels;
            xhat[i] = (v - mean[c]) * inv_std[c];
            out[i] = gv[c] * xhat[i] + bv[c];
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            channels,
            inner,
            xhat,
            inv_std,
        };
        let y = self.push(out, shape, ng, op, "batch_norm")?;
        Ok((y, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, channels, inner) =
            channel_layout(&shape).ok_or_else(|| shape_err("batch_norm", format!("input {:?}", shape)))?;
        if mean.len() != channels || var.len() != channels {
            return Err(shape_err("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, v) in xv.iter().enumerate() {
            let c = (i / inner) % channels;
            xhat[i] = (v - mean[c]) * inv_std[c];
            out[i] = gv[c] * xhat[i] + bv[c];
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::Affine {
            x,
            gamma,
            beta,
            channels,
            inner,
            xhat,
            inv_std,
        };
        self.push(out, shape, ng, op, "batch_norm")
    }

    /// `[N,C,H,W] -> [N,C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("input {:?}", shape)));
        }
        let inner = shape[2] * shape[3];
        let out = self
            .value(x)
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let ng = self.needs(x);
        self.push(out, vec![shape[0], shape[1]], ng, Op::GlobalAvgPool { x, inner }, "global_avg_pool")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        self.push(out, shape, ng, Op::Reshape { x }, "reshape")
    }

    /// Mean softmax cross-entropy of `logits[N,K]` against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {:?} with {} targets", shape, targets.len()),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(shape_err("softmax_cross_entropy", format!("target {} out of {} classes", t, k)));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[targets[i]];
        }
        loss /= n as f64;
        let ng = self.needs(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            classes: k,
            targets: targets.to_vec(),
            probs,
        };
        self.push(vec![loss], Vec::new(), ng, op, "softmax_cross_entropy")
    }

    /// Runs the reverse sweep from a scalar `loss`, leaving gradients on every
    /// differentiable leaf. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        self.consumed = true;
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let slot = if self.retained[idx] {
                self.grads[idx].clone()
            } else {
                self.grads[idx].take()
            };
            let Some(g) = slot else { continue };
            self.backward_node(idx, &g)?;
        }
        for g in self.grads.iter().flatten() {
            finite("backward", g)?;
        }
        Ok(())
    }

    fn send(&mut self, v: Var, g: Vec<f64>) {
        if self.nodes[v.0].needs_grad {
            accumulate(&mut self.grads[v.0], g);
        }
    }

    fn backward_node(&mut self, idx: usize, g: &[f64]) -> Result<()> {
        let mut sends: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g, self.value(b), &mut da);
                    sends.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, self.value(a), g, &mut db);
                    sends.push((b, db));
                }
            }
            &Op::MatMulNT { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(m, n, k, g, self.value(b), &mut da);
                    sends.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(n, m, k, g, self.value(a), &mut db);
                    sends.push((b, db));
                }
            }
            Op::Conv2d {
                x,
                w,
                geom,
                batch,
                h,
                wd,
                plane,
                cols,
            } => {
                let (x, w) = (*x, *w);
                let (o, ck, plane) = (geom.out_channels, geom.patch_len(), *plane);
                let img_len = geom.in_channels * h * wd;
                if self.needs(w) {
                    let mut dw = vec![0.0; o * ck];
                    for n in 0..*batch {
                        let gn = &g[n * o * plane..(n + 1) * o * plane];
                        gemm_nt(o, plane, ck, gn, &cols[n * ck * plane..(n + 1) * ck * plane], &mut dw);
                    }
                    sends.push((w, dw));
                }
                if self.needs(x) {
                    let wv = self.value(w);
                    let mut dx = vec![0.0; batch * img_len];
                    let mut dcols = vec![0.0; ck * plane];
                    for n in 0..*batch {
                        dcols.fill(0.0);
                        let gn = &g[n * o * plane..(n + 1) * o * plane];
                        gemm_tn(ck, o, plane, wv, gn, &mut dcols);
                        col2im(&dcols, *h, *wd, geom, &mut dx[n * img_len..(n + 1) * img_len]);
                    }
                    sends.push((x, dx));
                }
            }
            &Op::Add { a, b } => {
                sends.push((a, g.to_vec()));
                sends.push((b, g.to_vec()));
            }
            &Op::AddBias { x, bias, features } => {
                let mut db = vec![0.0; features];
                for (i, gv) in g.iter().enumerate() {
                    db[i % features] += gv;
                }
                sends.push((x, g.to_vec()));
                sends.push((bias, db));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                sends.push((a, g.iter().zip(bv).map(|(g, b)| g * b).collect()));
                sends.push((b, g.iter().zip(av).map(|(g, a)| g * a).collect()));
            }
            &Op::Scale { x, c } => sends.push((x, g.iter().map(|v| v * c).collect())),
            &Op::Sin { x } => {
                let xv = self.value(x);
                sends.push((x, g.iter().zip(xv).map(|(g, x)| g * x.cos()).collect()));
            }
            &Op::Relu { x } => {
                let xv = self.value(x);
                sends.push((x, g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()));
            }
            &Op::Sum { x } => sends.push((x, vec![g[0]; self.value(x).len()])),
            &Op::Mean { x } => {
                let n = self.value(x).len();
                sends.push((x, vec![g[0] / n as f64; n]));
            }
            &Op::MeanAbsRows { x, row_len } => {
                let xv = self.value(x);
                let dx = xv
                    .iter()
                    .enumerate()
                    .map(|(i, v)| g[i / row_len] * sign_or_zero(*v) / row_len as f64)
                    .collect();
                sends.push((x, dx));
            }
            &Op::MeanAbs { x } => {
                let xv = self.value(x);
                let n = xv.len() as f64;
                sends.push((x, xv.iter().map(|v| g[0] * sign_or_zero(*v) / n).collect()));
            }
            &Op::ScaleChannels { x, s, channels, inner } => {
                let (xv, sv) = (self.value(x), self.value(s));
                let per_layer = sv.len() == 1;
                let ch = |i: usize| if per_layer { 0 } else { (i / inner) % channels };
                if self.needs(x) {
                    sends.push((x, g.iter().enumerate().map(|(i, gv)| gv * sv[ch(i)]).collect()));
                }
                if self.needs(s) {
                    let mut ds = vec![0.0; sv.len()];
                    for (i, (gv, xv)) in g.iter().zip(xv).enumerate() {
                        ds[ch(i)] += gv * xv;
                    }
                    sends.push((s, ds));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels,
                inner,
                xhat,
                inv_std,
            } => {
                let (channels, inner) = (*channels, *inner);
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut sum_dxhat = vec![0.0; channels];
                let mut sum_dxhat_xhat = vec![0.0; channels];
                for (i, gi) in g.iter().enumerate() {
                    let c = (i / inner) % channels;
                    dgamma[c] += gi * xhat[i];
                    dbeta[c] += gi;
                    let dxh = gi * gv[c];
                    sum_dxhat[c] += dxh;
                    sum_dxhat_xhat[c] += dxh * xhat[i];
                }
                let count = (g.len() / channels) as f64;
                if self.needs(*x) {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let c = (i / inner) % channels;
                            inv_std[c] / count * (count * gi * gv[c] - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c])
                        })
                        .collect();
                    sends.push((*x, dx));
                }
                sends.push((*gamma, dgamma));
                sends.push((*beta, dbeta));
            }
            Op::Affine {
                x,
                gamma,
                beta,
                channels,
                inner,
                xhat,
                inv_std,
            } => {
                let (channels, inner) = (*channels, *inner);
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for (i, gi) in g.iter().enumerate() {
                    let c = (i / inner) % channels;
                    dgamma[c] += gi * xhat[i];
                    dbeta[c] += gi;
                }
                if self.needs(*x) {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let c = (i / inner) % channels;
                            gi * gv[c] * inv_std[c]
                        })
                        .collect();
                    sends.push((*x, dx));
                }
                sends.push((*gamma, dgamma));
                sends.push((*beta, dbeta));
            }
            &Op::Custom { x, id } => {
                let sur = &self.custom[id.0].surrogate;
                let xv = self.value(x);
                sends.push((x, g.iter().zip(xv).map(|(g, &x)| g * sur(x)).collect()));
            }
            &Op::GlobalAvgPool { x, inner } => {
                let dx = (0..g.len() * inner).map(|i| g[i / inner] / inner as f64).collect();
                sends.push((x, dx));
            }
            &Op::Reshape { x } => sends.push((x, g.to_vec())),
            Op::SoftmaxCrossEntropy {
                logits,
                classes,
                targets,
                probs,
            } => {
                let n = targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / n).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * classes + t] -= g[0] / n;
                }
                sends.push((*logits, d));
            }
        }
        for (v, gv) in sends {
            self.send(v, gv);
        }
        Ok(())
    }
}

fn sign_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let i = tape.leaf(&t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 3., 4.]);
        assert_eq!(tape.shape(y), &[2, 2]);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let w = tape.leaf(&Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn uniform_softmax_loss_is_ln2() {
        let mut tape = Tape::new();
        let l = tape.leaf(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert_relative_eq!(tape.value(loss)[0], std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[3], &[1., 2., 3.]).with_requires_grad(true)).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn retained_intermediate_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1., -2.]).with_requires_grad(true)).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let other = tape.scale(w, 3.0).unwrap();
        tape.retain_grad(sq);
        let a = tape.scale(sq, 0.5).unwrap();
        let b = tape.add(a, other).unwrap();
        let loss = tape.sum(b).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(sq).unwrap(), &[0.5, 0.5]);
        assert_eq!(tape.grad(other), None);
        assert_eq!(tape.grad(w).unwrap(), &[4., 1.]);
    }

    #[test]
    fn sine_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[1], &[0.0]).with_requires_grad(true)).unwrap();
        let s = tape.scale(w, 1.0).unwrap();
        let s = tape.sin(s).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1., 2.]).with_requires_grad(true)).unwrap();
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1., 2.]).with_requires_grad(true)).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros([2, 3])).unwrap();
        let b = tape.leaf(&Tensor::zeros([2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn non_finite_forward_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1], &[1e308])).unwrap();
        assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn constants_are_not_recorded_for_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1., 2.])).unwrap();
        let b = tape.sin(a).unwrap();
        let loss = tape.sum(b).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).is_none());
    }

    #[test]
    fn custom_grad_replaces_true_derivative() {
        let mut tape = Tape::new();
        let sign = tape.register_custom_grad(CustomGrad::new(
            "sign_ste",
            |x| if x >= 0.0 { 1.0 } else { -1.0 },
            |x| if x.abs() <= 1.0 { 1.0 } else { 0.0 },
        ));
        let w = tape
            .leaf(&t(&[4], &[0.5, -0.3, 1.0, -2.0]).with_requires_grad(true))
            .unwrap();
        let q = tape.custom(sign, w).unwrap();
        assert_eq!(tape.value(q), &[1., -1., 1., -1.]);
        let loss = tape.sum(q).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1., 1., 1., 0.]);
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        // d/dw [sum(sin w) + sum(w*w)] == cos w + 2w
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::from_vec(data.clone()).with_requires_grad(true)).unwrap();
        let s = tape.sin(w).unwrap();
        let s = tape.sum(s).unwrap();
        let q = tape.mul(w, w).unwrap();
        let q = tape.sum(q).unwrap();
        let loss = tape.add(s, q).unwrap();
        tape.backward(loss).unwrap();
        for (g, x) in tape.grad(w).unwrap().iter().zip(&data) {
            assert_relative_eq!(*g, x.cos() + 2.0 * x, epsilon = 1e-14);
        }
    }
}
