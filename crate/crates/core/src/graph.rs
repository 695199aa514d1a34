//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of nodes created by forward operations; node
//! creation order is a topological order, so the backward pass is a single
//! reverse walk. The graph is rebuilt every training step.
//!
//! Every forward operation checks its output for NaN/Inf and surfaces a
//! [`Error::NonFinite`] instead of letting bad values propagate.
//!
//! The two-branch combine node is the one deliberately non-gradient rule:
//! its forward blends branches with `alpha` while its backward scales
//! upstream gradients with an independently installed `beta`.

use crate::error::{Error, Result};
use crate::kernels;
use crate::shake::Phase;
use crate::tensor::{Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Loss reduction over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        input: NodeId,
    },
    AvgPool {
        input: NodeId,
        window: usize,
        stride: usize,
    },
    PixelShift {
        input: NodeId,
        dy: isize,
        dx: isize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        ca: usize,
        cb: usize,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    BiasAddChannel {
        input: NodeId,
        bias: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor<T>,
        reduction: Reduction,
    },
    ShakeCombine {
        skip: Option<NodeId>,
        b1: NodeId,
        b2: NodeId,
        alpha: Vec<f64>,
        beta: Option<Vec<f64>>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Tape of forward operations with reverse-mode gradients.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Usage(format!("node id {} out of range", id.0)))
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Data leaf: receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Differentiable leaf (parameters, or test probes).
    pub fn var(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Remove and return the accumulated gradient of a node.
    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.nodes[id.0].grad.take()
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernel)?;
        let out =
            kernels::conv2d_forward(self.value(input), self.value(kernel), stride, pad)?;
        out.check_finite("conv2d")?;
        let ng = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            out,
            ng,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
        ))
    }

    /// Batch normalization over (N, H, W) per channel.
    ///
    /// Train mode normalizes by batch statistics and updates the running
    /// stats in place by exponential moving average (the running variance
    /// uses the unbiased estimator). Eval mode normalizes by the running
    /// stats.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        train: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(scale)?;
        self.check(shift)?;
        if eps <= 0.0 {
            return Err(Error::Config("batchnorm eps must be positive".into()));
        }
        if !(0.0 < momentum && momentum < 1.0) {
            return Err(Error::Config("batchnorm momentum must be in (0,1)".into()));
        }
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(Error::Config(format!(
                "batchnorm scale/shift must have shape [{c}]"
            )));
        }
        let m = n * h * w;
        let (mean, inv_std) = if train {
            if m < 2 {
                return Err(Error::Config(
                    "batchnorm train mode requires at least 2 values per channel".into(),
                ));
            }
            let (mean, var) = kernels::channel_stats(self.value(input))?;
            let unbias = m as f64 / (m as f64 - 1.0);
            for ch in 0..c {
                let rm = running_mean.data()[ch].as_f64();
                let rv = running_var.data()[ch].as_f64();
                running_mean.data_mut()[ch] =
                    T::from_f64((1.0 - momentum) * rm + momentum * mean[ch]);
                running_var.data_mut()[ch] =
                    T::from_f64((1.0 - momentum) * rv + momentum * var[ch] * unbias);
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (mean, inv_std)
        } else {
            let mean: Vec<f64> = running_mean.data().iter().map(|v| v.as_f64()).collect();
            let inv_std = running_var
                .data()
                .iter()
                .map(|v| 1.0 / (v.as_f64() + eps).sqrt())
                .collect();
            (mean, inv_std)
        };

        let hw = h * w;
        let mut out = Tensor::zeros(self.value(input).shape());
        {
            let idata = self.value(input).data();
            let sdata = self.value(scale).data();
            let bdata = self.value(shift).data();
            let odata = out.data_mut();
            for img in 0..n {
                for ch in 0..c {
                    let mu = T::from_f64(mean[ch]);
                    let is = T::from_f64(inv_std[ch]);
                    let g = sdata[ch];
                    let b = bdata[ch];
                    let base = (img * c + ch) * hw;
                    for i in 0..hw {
                        odata[base + i] = g * ((idata[base + i] - mu) * is) + b;
                    }
                }
            }
        }
        out.check_finite("batchnorm2d")?;
        let ng = self.needs(input) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            out,
            ng,
            Op::BatchNorm {
                input,
                scale,
                shift,
                mean,
                inv_std,
                train,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        out.check_finite("relu")?;
        let ng = self.needs(input);
        Ok(self.push(out, ng, Op::Relu { input }))
    }

    pub fn avgpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.check(input)?;
        let out = kernels::avgpool2d_forward(self.value(input), window, stride)?;
        out.check_finite("avgpool2d")?;
        let ng = self.needs(input);
        Ok(self.push(
            out,
            ng,
            Op::AvgPool {
                input,
                window,
                stride,
            },
        ))
    }

    pub fn pixel_shift(&mut self, input: NodeId, dy: isize, dx: isize) -> Result<NodeId> {
        self.check(input)?;
        let out = kernels::pixel_shift(self.value(input), dy, dx)?;
        out.check_finite("pixel_shift")?;
        let ng = self.needs(input);
        Ok(self.push(out, ng, Op::PixelShift { input, dy, dx }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        out.check_finite("concat_channels")?;
        let ca = self.value(a).shape()[1];
        let cb = self.value(b).shape()[1];
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Concat { a, b, ca, cb }))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let out =
            kernels::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        out.check_finite("linear")?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            ng,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Add a per-channel bias to a 4-d activation.
    pub fn bias_add_channel(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(bias)?;
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Config(format!(
                "bias shape {:?}, expected [{c}]",
                self.value(bias).shape()
            )));
        }
        let hw = h * w;
        let mut out = self.value(input).clone();
        {
            let bdata = self.value(bias).data().to_vec();
            let odata = out.data_mut();
            for img in 0..n {
                for (ch, b) in bdata.iter().enumerate() {
                    let base = (img * c + ch) * hw;
                    for v in &mut odata[base..base + hw] {
                        *v += *b;
                    }
                }
            }
        }
        out.check_finite("bias_add_channel")?;
        let ng = self.needs(input) || self.needs(bias);
        Ok(self.push(out, ng, Op::BiasAddChannel { input, bias }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let out = self.value(input).reshaped(shape)?;
        let ng = self.needs(input);
        Ok(self.push(out, ng, Op::Reshape { input }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Config(format!(
                "add: shape {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_in_place(self.value(b))?;
        out.check_finite("add")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Add { a, b }))
    }

    /// Mean (or sum) of `-log softmax(logits)[label]` over the batch.
    /// Softmax is stabilized by row-max subtraction and computed at double
    /// precision.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        self.check(logits)?;
        let (n, k) = self.value(logits).dims2()?;
        if k < 2 {
            return Err(Error::Config("softmax needs at least 2 classes".into()));
        }
        if labels.len() != n {
            return Err(Error::Input(format!(
                "{} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range [0,{k})")));
        }
        let ldata = self.value(logits).data();
        let mut probs = Tensor::zeros(&[n, k]);
        let mut loss = 0.0f64;
        for row in 0..n {
            let r = &ldata[row * k..(row + 1) * k];
            let maxv = r.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let mut denom = 0.0f64;
            for v in r {
                denom += (v.as_f64() - maxv).exp();
            }
            let log_denom = denom.ln();
            for (j, v) in r.iter().enumerate() {
                probs.data_mut()[row * k + j] = T::from_f64((v.as_f64() - maxv).exp() / denom);
            }
            loss -= ldata[row * k + labels[row]].as_f64() - maxv - log_denom;
        }
        if reduction == Reduction::Mean {
            loss /= n as f64;
        }
        let out = Tensor::scalar(T::from_f64(loss));
        out.check_finite("softmax_cross_entropy")?;
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            ng,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
        ))
    }

    /// Per-image affine combination of two branch outputs plus an optional
    /// skip term: `out_j = skip_j + alpha_j * b1_j + (1 - alpha_j) * b2_j`.
    ///
    /// In test phase both branches are weighted by 0.5 regardless of the
    /// supplied coefficients. The backward rule scales upstream gradients
    /// by `beta_j` / `1 - beta_j`, where `beta` must be installed with
    /// [`Graph::set_shake_beta`] after the forward pass.
    pub fn shake_combine(
        &mut self,
        skip: Option<NodeId>,
        b1: NodeId,
        b2: NodeId,
        alpha: &[f64],
        phase: Phase,
    ) -> Result<NodeId> {
        self.check(b1)?;
        self.check(b2)?;
        if let Some(s) = skip {
            self.check(s)?;
        }
        let shape = self.value(b1).shape().to_vec();
        if self.value(b2).shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "shake_combine: branch shapes {:?} vs {:?}",
                shape,
                self.value(b2).shape()
            )));
        }
        if let Some(s) = skip {
            if self.value(s).shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "shake_combine: skip shape {:?} vs branch {:?}",
                    self.value(s).shape(),
                    shape
                )));
            }
        }
        let n = shape[0];
        let alpha: Vec<f64> = match phase {
            Phase::Test => vec![0.5; n],
            Phase::Train => {
                if alpha.len() != n {
                    return Err(Error::Config(format!(
                        "shake_combine: {} coefficients for batch of {n}",
                        alpha.len()
                    )));
                }
                alpha.to_vec()
            }
        };

        let per_image = shape[1..].iter().product::<usize>();
        let mut out = Tensor::zeros(&shape);
        {
            let b1d = self.value(b1).data();
            let b2d = self.value(b2).data();
            let skipd = skip.map(|s| self.value(s).data());
            let odata = out.data_mut();
            for img in 0..n {
                let a = T::from_f64(alpha[img]);
                let na = T::from_f64(1.0 - alpha[img]);
                let base = img * per_image;
                match skipd {
                    Some(sd) => {
                        for i in base..base + per_image {
                            odata[i] = sd[i] + a * b1d[i] + na * b2d[i];
                        }
                    }
                    None => {
                        for i in base..base + per_image {
                            odata[i] = a * b1d[i] + na * b2d[i];
                        }
                    }
                }
            }
        }
        out.check_finite("shake_combine")?;
        let ng = self.needs(b1) || self.needs(b2) || skip.is_some_and(|s| self.needs(s));
        Ok(self.push(
            out,
            ng,
            Op::ShakeCombine {
                skip,
                b1,
                b2,
                alpha,
                beta: None,
            },
        ))
    }

    /// Install backward coefficients on a combine node.
    pub fn set_shake_beta(&mut self, id: NodeId, beta: &[f64]) -> Result<()> {
        self.check(id)?;
        let n = self.nodes[id.0].value.shape()[0];
        match &mut self.nodes[id.0].op {
            Op::ShakeCombine { beta: slot, .. } => {
                if beta.len() != n {
                    return Err(Error::Config(format!(
                        "set_shake_beta: {} coefficients for batch of {n}",
                        beta.len()
                    )));
                }
                *slot = Some(beta.to_vec());
                Ok(())
            }
            _ => Err(Error::Usage(format!(
                "node {} is not a shake_combine node",
                id.0
            ))),
        }
    }

    /// The forward alpha coefficients recorded on a combine node.
    pub fn shake_alpha(&self, id: NodeId) -> Result<&[f64]> {
        match &self.nodes[id.0].op {
            Op::ShakeCombine { alpha, .. } => Ok(alpha),
            _ => Err(Error::Usage(format!(
                "node {} is not a shake_combine node",
                id.0
            ))),
        }
    }

    /// Reverse pass from `root`, seeding with a tensor of ones (so for a
    /// scalar loss the seed is 1). Gradients accumulate additively across
    /// fan-out. Standard adjoints everywhere except combine nodes, which
    /// apply their installed `beta` coefficients.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty graph".into()));
        }
        self.check(root)?;
        let seed = Tensor::filled(self.nodes[root.0].value.shape(), T::one());
        self.accum(root, seed)?;

        for idx in (0..=root.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[idx].grad.take().expect("checked above");
            let deltas = self.adjoints(idx, &g)?;
            self.nodes[idx].grad = Some(g);
            for (target, delta) in deltas {
                self.accum(target, delta)?;
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: Tensor<T>) -> Result<()> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        debug_assert_eq!(self.nodes[id.0].value.shape(), delta.shape());
        match &mut self.nodes[id.0].grad {
            Some(g) => g.add_in_place(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    /// Adjoints of node `idx` with upstream gradient `g`, as a list of
    /// (input node, gradient contribution). Inputs that do not require
    /// gradients are skipped.
    fn adjoints(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (gin, gk) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *pad,
                    self.needs(*input),
                )?;
                if let Some(gin) = gin {
                    out.push((*input, gin));
                }
                if self.needs(*kernel) {
                    out.push((*kernel, gk));
                }
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                mean,
                inv_std,
                train,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let sdata = self.value(*scale).data();

                // Per-channel reductions at double precision.
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        let mu = mean[ch];
                        let is = inv_std[ch];
                        let mut sg = 0.0;
                        let mut sgx = 0.0;
                        for i in 0..hw {
                            let gv = g.data()[base + i].as_f64();
                            let xhat = (x.data()[base + i].as_f64() - mu) * is;
                            sg += gv;
                            sgx += gv * xhat;
                        }
                        sum_g[ch] += sg;
                        sum_gx[ch] += sgx;
                    }
                }

                if self.needs(*input) {
                    let mut gin = Tensor::zeros(x.shape());
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let mu = mean[ch];
                            let is = inv_std[ch];
                            let k = sdata[ch].as_f64() * is;
                            let (mg, mgx) = if *train {
                                (sum_g[ch] / m, sum_gx[ch] / m)
                            } else {
                                (0.0, 0.0)
                            };
                            for i in 0..hw {
                                let gv = g.data()[base + i].as_f64();
                                let xhat = (x.data()[base + i].as_f64() - mu) * is;
                                gin.data_mut()[base + i] =
                                    T::from_f64(k * (gv - mg - xhat * mgx));
                            }
                        }
                    }
                    out.push((*input, gin));
                }
                if self.needs(*scale) {
                    let gs =
                        Tensor::from_vec(&[c], sum_gx.iter().map(|&v| T::from_f64(v)).collect())?;
                    out.push((*scale, gs));
                }
                if self.needs(*shift) {
                    let gb =
                        Tensor::from_vec(&[c], sum_g.iter().map(|&v| T::from_f64(v)).collect())?;
                    out.push((*shift, gb));
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.value(*input);
                    let mut gin = g.clone();
                    for (gv, xv) in gin.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    out.push((*input, gin));
                }
            }
            Op::AvgPool {
                input,
                window,
                stride,
            } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape().to_vec();
                    let gin = kernels::avgpool2d_backward(&shape, g, *window, *stride)?;
                    out.push((*input, gin));
                }
            }
            Op::PixelShift { input, dy, dx } => {
                if self.needs(*input) {
                    let gin = kernels::pixel_shift(g, -dy, -dx)?;
                    out.push((*input, gin));
                }
            }
            Op::Concat { a, b, ca, cb } => {
                let (ga, gb) = kernels::split_channels(g, *ca, *cb)?;
                if self.needs(*a) {
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    out.push((*b, gb));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (gin, gw, gb) = kernels::linear_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    self.needs(*input),
                )?;
                if let Some(gin) = gin {
                    out.push((*input, gin));
                }
                if self.needs(*weight) {
                    out.push((*weight, gw));
                }
                if self.needs(*bias) {
                    out.push((*bias, gb));
                }
            }
            Op::BiasAddChannel { input, bias } => {
                if self.needs(*input) {
                    out.push((*input, g.clone()));
                }
                if self.needs(*bias) {
                    let (n, c, h, w) = g.dims4()?;
                    let hw = h * w;
                    let mut gb = Tensor::zeros(&[c]);
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let mut s = T::zero();
                            for v in &g.data()[base..base + hw] {
                                s += *v;
                            }
                            gb.data_mut()[ch] += s;
                        }
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    let gin = g.reshaped(self.value(*input).shape())?;
                    out.push((*input, gin));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
                reduction,
            } => {
                if self.needs(*logits) {
                    let (n, k) = probs.dims2()?;
                    let scale = match reduction {
                        Reduction::Mean => T::from_f64(1.0 / n as f64),
                        Reduction::Sum => T::one(),
                    };
                    let gup = g.item()?;
                    let mut gl = probs.clone();
                    for (row, &label) in labels.iter().enumerate() {
                        gl.data_mut()[row * k + label] -= T::one();
                    }
                    for v in gl.data_mut() {
                        *v *= scale * gup;
                    }
                    out.push((*logits, gl));
                }
            }
            Op::ShakeCombine {
                skip,
                b1,
                b2,
                alpha: _,
                beta,
            } => {
                let beta = beta.as_ref().ok_or_else(|| {
                    Error::Usage(
                        "shake_combine backward without beta: run the backward \
                         coefficient pass first"
                            .into(),
                    )
                })?;
                let n = node.value.shape()[0];
                let per_image = node.value.numel() / n;
                if self.needs(*b1) {
                    let mut g1 = g.clone();
                    for img in 0..n {
                        let b = T::from_f64(beta[img]);
                        for v in &mut g1.data_mut()[img * per_image..(img + 1) * per_image] {
                            *v = b * *v;
                        }
                    }
                    out.push((*b1, g1));
                }
                if self.needs(*b2) {
                    let mut g2 = g.clone();
                    for img in 0..n {
                        let b = T::from_f64(1.0 - beta[img]);
                        for v in &mut g2.data_mut()[img * per_image..(img + 1) * per_image] {
                            *v = b * *v;
                        }
                    }
                    out.push((*b2, g2));
                }
                if let Some(s) = skip {
                    if self.needs(*s) {
                        out.push((*s, g.clone()));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn relu_cases() {
        let mut g = Graph::new();
        let x = g.var(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        // All-negative input: zero output, zero gradient.
        let mut g = Graph::new();
        let x = g.var(Tensor::from_vec(&[4], vec![-1.0, -2.0, -3.0, -0.5]).unwrap());
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        g.backward(y).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));

        // Identity on non-negative input.
        let mut g = Graph::new();
        let x = g.var(Tensor::from_vec(&[3], vec![0.0, 1.5, 7.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn fan_out_gradients_add() {
        let mut g = Graph::new();
        let x = g.var(rand_tensor(&[2, 3], 1));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_grad_is_ones() {
        let mut g = Graph::new();
        let a = g.var(rand_tensor(&[2, 3, 4, 4], 2));
        let b = g.input(rand_tensor(&[2, 2, 4, 4], 3));
        let cat = g.concat_channels(a, b).unwrap();
        g.backward(cat).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.var(Tensor::<f64>::zeros(&[4, 10]));
        let loss = g
            .softmax_cross_entropy(logits, &[0, 3, 5, 9], Reduction::Mean)
            .unwrap();
        let v = g.value(loss).item().unwrap();
        assert!((v - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_saturated() {
        let mut g = Graph::new();
        let mut t = Tensor::<f64>::zeros(&[1, 10]);
        t.data_mut()[3] = 1000.0;
        let logits = g.var(t);
        let loss = g
            .softmax_cross_entropy(logits, &[3], Reduction::Mean)
            .unwrap();
        assert!(g.value(loss).item().unwrap() < 1e-9);
    }

    #[test]
    fn softmax_xent_matches_naive_formula() {
        let logits = rand_tensor(&[4, 10], 5);
        let labels = [1usize, 0, 7, 9];
        let mut g = Graph::new();
        let l = g.var(logits.clone());
        let loss = g
            .softmax_cross_entropy(l, &labels, Reduction::Mean)
            .unwrap();
        // Unstabilized direct formula.
        let mut naive = 0.0f64;
        for (row, &label) in labels.iter().enumerate() {
            let r = &logits.data()[row * 10..(row + 1) * 10];
            let denom: f64 = r.iter().map(|v| v.exp()).sum();
            naive -= (r[label].exp() / denom).ln();
        }
        naive /= 4.0;
        assert!((g.value(loss).item().unwrap() - naive).abs() < 1e-10);
    }

    #[test]
    fn softmax_label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.var(Tensor::<f64>::zeros(&[1, 4]));
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[4], Reduction::Mean),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn backward_on_empty_graph_is_usage_error() {
        let mut g: Graph<f64> = Graph::new();
        assert!(matches!(
            g.backward(NodeId(0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn linear_loss_matches_finite_differences() {
        let x = rand_tensor(&[3, 4], 7);
        let w0 = rand_tensor(&[2, 4], 8);
        let b0 = rand_tensor(&[2], 9);
        let labels = [0usize, 1, 0];

        let run = |wt: &Tensor<f64>, bt: &Tensor<f64>| -> f64 {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let w = g.var(wt.clone());
            let b = g.var(bt.clone());
            let y = g.linear(xi, w, b).unwrap();
            let loss = g
                .softmax_cross_entropy(y, &labels, Reduction::Mean)
                .unwrap();
            g.value(loss).item().unwrap()
        };

        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let w = g.var(w0.clone());
        let b = g.var(b0.clone());
        let y = g.linear(xi, w, b).unwrap();
        let loss = g
            .softmax_cross_entropy(y, &labels, Reduction::Mean)
            .unwrap();
        g.backward(loss).unwrap();

        let h = 1e-5;
        let gw = g.grad(w).unwrap().clone();
        for idx in 0..8 {
            let mut wp = w0.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w0.clone();
            wm.data_mut()[idx] -= h;
            let fd = (run(&wp, &b0) - run(&wm, &b0)) / (2.0 * h);
            let a = gw.data()[idx];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "w[{idx}]: fd {fd} vs analytic {a}");
        }
        let gb = g.grad(b).unwrap().clone();
        for idx in 0..2 {
            let mut bp = b0.clone();
            bp.data_mut()[idx] += h;
            let mut bm = b0.clone();
            bm.data_mut()[idx] -= h;
            let fd = (run(&w0, &bp) - run(&w0, &bm)) / (2.0 * h);
            let a = gb.data()[idx];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "b[{idx}]");
        }
    }

    #[test]
    fn shake_combine_forward_cases() {
        // alpha = 0.5 equals skip + (b1 + b2) / 2.
        let skip = rand_tensor(&[2, 3, 2, 2], 11);
        let b1 = rand_tensor(&[2, 3, 2, 2], 12);
        let b2 = rand_tensor(&[2, 3, 2, 2], 13);
        let mut g = Graph::new();
        let s = g.input(skip.clone());
        let x1 = g.input(b1.clone());
        let x2 = g.input(b2.clone());
        let y = g
            .shake_combine(Some(s), x1, x2, &[0.5, 0.5], Phase::Train)
            .unwrap();
        for i in 0..skip.numel() {
            let expect = skip.data()[i] + 0.5 * b1.data()[i] + 0.5 * b2.data()[i];
            assert!((g.value(y).data()[i] - expect).abs() < 1e-15);
        }

        // alpha = 1 passes branch 1 through exactly.
        let mut g = Graph::new();
        let s = g.input(skip.clone());
        let x1 = g.input(b1.clone());
        let x2 = g.input(b2.clone());
        let y = g
            .shake_combine(Some(s), x1, x2, &[1.0, 1.0], Phase::Train)
            .unwrap();
        for i in 0..skip.numel() {
            let expect = skip.data()[i] + b1.data()[i];
            assert_eq!(g.value(y).data()[i].to_bits(), expect.to_bits());
        }

        // Scalar arithmetic: 1 + 0.3*2 + 0.7*4 = 4.4.
        let mut g = Graph::new();
        let s = g.input(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0f64]).unwrap());
        let x1 = g.input(Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let x2 = g.input(Tensor::from_vec(&[1, 1, 1, 1], vec![4.0]).unwrap());
        let y = g.shake_combine(Some(s), x1, x2, &[0.3], Phase::Train).unwrap();
        assert!((g.value(y).data()[0] - 4.4).abs() < 1e-15);
    }

    #[test]
    fn shake_combine_backward_is_beta_scaling() {
        let b1 = rand_tensor(&[3, 2, 2, 2], 21);
        let b2 = rand_tensor(&[3, 2, 2, 2], 22);
        let beta = [0.2, 0.7, 1.0];
        let mut g = Graph::new();
        let x1 = g.var(b1);
        let x2 = g.var(b2);
        let y = g
            .shake_combine(None, x1, x2, &[0.4, 0.5, 0.6], Phase::Train)
            .unwrap();
        g.set_shake_beta(y, &beta).unwrap();
        g.backward(y).unwrap();
        let g1 = g.grad(x1).unwrap();
        let g2 = g.grad(x2).unwrap();
        let per = 8;
        for img in 0..3 {
            for i in 0..per {
                // Upstream seed is 1, so gradients are the cast coefficients.
                assert_eq!(g1.data()[img * per + i].to_bits(), beta[img].to_bits());
                assert_eq!(
                    g2.data()[img * per + i].to_bits(),
                    (1.0 - beta[img]).to_bits()
                );
            }
        }
    }

    #[test]
    fn shake_backward_without_beta_is_usage_error() {
        let mut g = Graph::new();
        let x1 = g.var(rand_tensor(&[2, 1, 1, 1], 31));
        let x2 = g.var(rand_tensor(&[2, 1, 1, 1], 32));
        let y = g
            .shake_combine(None, x1, x2, &[0.4, 0.6], Phase::Train)
            .unwrap();
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn test_phase_ignores_coefficients() {
        let b1 = rand_tensor(&[2, 2, 2, 2], 41);
        let b2 = rand_tensor(&[2, 2, 2, 2], 42);
        let mut g = Graph::new();
        let x1 = g.input(b1.clone());
        let x2 = g.input(b2.clone());
        let y = g
            .shake_combine(None, x1, x2, &[0.9, 0.1], Phase::Test)
            .unwrap();
        for i in 0..b1.numel() {
            let expect = 0.5 * b1.data()[i] + 0.5 * b2.data()[i];
            assert!((g.value(y).data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn nonfinite_forward_is_surfaced() {
        let mut g = Graph::new();
        let x = g.var(Tensor::from_vec(&[1, 2], vec![1e308, 1e308]).unwrap());
        let y = g.add(x, x);
        assert!(matches!(y, Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        // Channel values {0, 2}: mean 1, biased variance 1.
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0f64, 2.0]).unwrap();
        let mut g = Graph::new();
        let xi = g.input(x);
        let scale = g.var(Tensor::filled(&[1], 1.0));
        let shift = g.var(Tensor::zeros(&[1]));
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::filled(&[1], 1.0);
        let y = g
            .batchnorm2d(xi, scale, shift, &mut rm, &mut rv, true, 1e-5, 0.1)
            .unwrap();
        let out = g.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-4);
        assert!((out[1] - 1.0).abs() < 1e-4);
        // Running stats moved toward batch stats (unbiased var = 2).
        assert!((rm.data()[0] - 0.1).abs() < 1e-12);
        assert!((rv.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_constant_input_is_zero() {
        let x = Tensor::filled(&[2, 3, 2, 2], 5.0f64);
        let mut g = Graph::new();
        let xi = g.input(x);
        let scale = g.var(Tensor::filled(&[3], 1.0));
        let shift = g.var(Tensor::zeros(&[3]));
        let mut rm = Tensor::zeros(&[3]);
        let mut rv = Tensor::filled(&[3], 1.0);
        let y = g
            .batchnorm2d(xi, scale, shift, &mut rm, &mut rv, true, 1e-5, 0.1)
            .unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let x = rand_tensor(&[2, 2, 3, 3], 51);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let scale = g.var(Tensor::filled(&[2], 1.0));
        let shift = g.var(Tensor::zeros(&[2]));
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::filled(&[2], 1.0);
        let y = g
            .batchnorm2d(xi, scale, shift, &mut rm, &mut rv, false, 1e-5, 0.1)
            .unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn batchnorm_train_needs_two_samples() {
        let mut g = Graph::new();
        let xi = g.input(Tensor::<f64>::zeros(&[1, 2, 1, 1]));
        let scale = g.var(Tensor::filled(&[2], 1.0));
        let shift = g.var(Tensor::zeros(&[2]));
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::filled(&[2], 1.0);
        assert!(g
            .batchnorm2d(xi, scale, shift, &mut rm, &mut rv, true, 1e-5, 0.1)
            .is_err());
    }
}
