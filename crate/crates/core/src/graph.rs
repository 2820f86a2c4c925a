//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value plus whatever the
//! backward rule needs. A node requires a gradient iff one of its inputs
//! does, so frozen sub-networks cost nothing in the backward pass and their
//! leaves always receive an exactly zero gradient.

use crate::error::{Error, Result};
use crate::linalg::{gemm, Operand};
use crate::spectral::{amplitude_of, phase_of, Plan2d, IMAG_RESIDUAL_TOLERANCE};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with the supplied running statistics.
    Eval,
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var_unbiased: Vec<f64>,
}

/// Direction of the KL term between a target and a learner distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(target || learner)`.
    #[default]
    TargetFirst,
    /// `KL(learner || target)`.
    LearnerFirst,
}

enum Op {
    Leaf,
    Conv1x1 { x: Var, w: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { x: Var },
    Sigmoid { x: Var },
    AvgPool { x: Var, kh: usize, kw: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Mix { a: Var, b: Var, lambda: Var },
    Softmax { x: Var, tau: f64 },
    Select { x: Var, index: usize },
    Gather { x: Var, index: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Kl { learner: Var, tau: f64, p_target: Vec<f64>, q_learner: Vec<f64>, direction: KlDirection },
    Mse { a: Var, b: Var },
    Dft2 { x: Var },
    Idft2 { f: Var },
    Amplitude { f: Var },
    Phase { f: Var },
    Couple { amplitude: Var, phase: Var },
    Concat { xs: Vec<Var> },
    ScaleChannels { x: Var, s: Var },
    PadChannels { x: Var },
    Reshape { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::AvgPool { .. } => "avg_pool",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Mix { .. } => "mix",
            Op::Softmax { .. } => "softmax",
            Op::Select { .. } => "select",
            Op::Gather { .. } => "gather",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Kl { .. } => "kl_div",
            Op::Mse { .. } => "mse",
            Op::Dft2 { .. } => "dft2",
            Op::Idft2 { .. } => "idft2",
            Op::Amplitude { .. } => "amplitude",
            Op::Phase { .. } => "phase",
            Op::Couple { .. } => "couple",
            Op::Concat { .. } => "concat",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::PadChannels { .. } => "pad_channels",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if it did not require one or did not
    /// participate in the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, with zeros substituted for non-participation.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Deliberate backward-pass defects used to prove the gradient checker
/// catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the phase gradient of `couple`.
    CoupleSignFlip,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::shape(op, detail)
}

fn softmax_rows(x: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let mut z = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi / tau - max).exp();
            z += *oi;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let lse = row.iter().map(|&v| (v / tau - max).exp()).sum::<f64>().ln() + max;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi / tau - lse;
        }
    }
    out
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `[.., 2, H, W]` into (planes, h, w).
fn complex_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 3 || shape[r - 3] != 2 {
        return Err(shape_err(op, format!("expected [.., 2, H, W], got {shape:?}")));
    }
    Ok((shape[..r - 3].iter().product(), shape[r - 2], shape[r - 1]))
}

fn real_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return Err(shape_err(op, format!("expected [.., H, W], got {shape:?}")));
    }
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass carries `fault`.
    pub fn with_fault(fault: Fault) -> Self {
        Self { nodes: Vec::new(), fault: Some(fault) }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `x`: gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// The first node, in execution order, holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.all_finite()).map(|(i, n)| (i, n.op.name()))
    }

    // ---------------------------------------------------------------- layers

    /// Pointwise convolution: `out[b,c,h,w] = sum_k w[c,k] * x[b,k,h,w]`.
    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, cin, h, wd) = self.value(x).dims4("conv1x1")?;
        let (cout, wcin) = self.value(w).dims2("conv1x1")?;
        if wcin != cin {
            return Err(shape_err("conv1x1", format!("weight [{cout}, {wcin}] cannot consume {cin} input channels")));
        }
        let hw = h * wd;
        let mut out = vec![0.0; b * cout * hw];
        let (xd, wdata) = (self.value(x).data(), self.value(w).data());
        for n in 0..b {
            gemm(
                cout,
                cin,
                hw,
                1.0,
                Operand::plain(wdata),
                Operand::plain(&xd[n * cin * hw..(n + 1) * cin * hw]),
                0.0,
                &mut out[n * cout * hw..(n + 1) * cout * hw],
            );
        }
        let value = Tensor::new(vec![b, cout, h, wd], out)?;
        Ok(self.push(value, Op::Conv1x1 { x, w }, &[x, w]))
    }

    /// Batch normalisation over `(B, H, W)` per channel, followed by the
    /// affine map. In train mode the observed statistics are returned so the
    /// caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<(Var, Option<BatchStats>)> {
        let (b, c, h, w) = self.value(x).dims4("batch_norm")?;
        for (name, v) in [("scale", gamma), ("shift", beta)] {
            if self.value(v).len() != c {
                return Err(shape_err(
                    "batch_norm",
                    format!("{name} has {} entries for {c} channels", self.value(v).len()),
                ));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm", "running statistics length".into()));
        }
        if mode == BnMode::Train && b < 2 {
            return Err(Error::InvalidArgument("batch_norm: train mode needs a batch of at least 2".into()));
        }
        let hw = h * w;
        let count = (b * hw) as f64;
        let xd = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for n in 0..b {
                        s += xd[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for n in 0..b {
                        ss +=
                            xd[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count;
                }
                let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
                let stats = BatchStats { mean: mean.clone(), var_unbiased: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: mode == BnMode::Train };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(stable_sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    /// Average pooling of `[B, C, H, W]` down to `[B, C, ho, wo]` with
    /// non-overlapping `(H/ho) x (W/wo)` windows.
    pub fn avg_pool_to(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("avg_pool")?;
        let (ho, wo) = target;
        if ho == 0 || wo == 0 || ho > h || wo > w || h % ho != 0 || w % wo != 0 {
            return Err(shape_err("avg_pool", format!("cannot pool {h}x{w} to {ho}x{wo} with equal windows")));
        }
        let (kh, kw) = (h / ho, w / wo);
        let inv = 1.0 / (kh * kw) as f64;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for r in 0..h {
                for col in 0..w {
                    dst[(r / kh) * wo + col / kw] += src[r * w + col];
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool { x, kh, kw }, &[x]))
    }

    /// `y = x W^T (+ b)` for `x: [B, K]`, `W: [L, K]`, `b: [L]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.value(x).dims2("linear")?;
        let (l, wk) = self.value(w).dims2("linear")?;
        if wk != k {
            return Err(shape_err("linear", format!("weight [{l}, {wk}] for input width {k}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != l {
                return Err(shape_err("linear", format!("bias length {} for {l} outputs", self.value(b).len())));
            }
        }
        let mut out = vec![0.0; n * l];
        if let Some(b) = b {
            let bd = self.value(b).data();
            out.chunks_mut(l).for_each(|row| row.copy_from_slice(bd));
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(n, k, l, 1.0, Operand::plain(self.value(x).data()), Operand::t(self.value(w).data()), beta, &mut out);
        let value = Tensor::new(vec![n, l], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        Tensor::from_fn(self.value(a).shape(), |i| f(ad[i], bd[i]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// Convex combination `lambda * a + (1 - lambda) * b` with a scalar
    /// `lambda` node.
    pub fn mix(&mut self, a: Var, b: Var, lambda: Var) -> Result<Var> {
        self.same_shape(a, b, "mix")?;
        if self.value(lambda).len() != 1 {
            return Err(shape_err("mix", "lambda must be a scalar".into()));
        }
        let l = self.value(lambda).item();
        let value = self.zip_with(a, b, |x, y| l * x + (1.0 - l) * y);
        Ok(self.push(value, Op::Mix { a, b, lambda }, &[a, b, lambda]))
    }

    // ------------------------------------------------------ reductions/heads

    /// Row-wise `softmax(x / tau)` over the last dimension.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let t = self.value(x);
        let cols = *t.shape().last().expect("rank >= 1");
        let value = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), cols, tau))?;
        Ok(self.push(value, Op::Softmax { x, tau }, &[x]))
    }

    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(shape_err("select", format!("index {index} of {}", t.len())));
        }
        let value = Tensor::scalar(t.data()[index]);
        Ok(self.push(value, Op::Select { x, index }, &[x]))
    }

    /// `out[i] = x[index[i]]` over the flattened input.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if index.is_empty() || index.iter().any(|&i| i >= t.len()) {
            return Err(shape_err("gather", format!("index out of range for {} values", t.len())));
        }
        let value = Tensor::new(vec![index.len()], index.iter().map(|&i| t.data()[i]).collect())?;
        Ok(self.push(value, Op::Gather { x, index }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean { x }, &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for batch {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("cross_entropy: label {bad} outside [0, {k})")));
        }
        let data = self.value(logits).data();
        let logp = log_softmax_rows(data, k, 1.0);
        let loss = -labels.iter().enumerate().map(|(i, &y)| logp[i * k + y]).sum::<f64>() / n as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Batch-mean KL divergence between `p = softmax(target / tau)` and
    /// `q = softmax(learner / tau)`. Only the learner receives gradient.
    pub fn kl_div(&mut self, target: Var, learner: Var, tau: f64, direction: KlDirection) -> Result<Var> {
        check_tau(tau)?;
        self.same_shape(target, learner, "kl_div")?;
        let (n, k) = self.value(learner).dims2("kl_div")?;
        let lp = log_softmax_rows(self.value(target).data(), k, tau);
        let lq = log_softmax_rows(self.value(learner).data(), k, tau);
        let kl: f64 = match direction {
            KlDirection::TargetFirst => lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum(),
            KlDirection::LearnerFirst => lp.iter().zip(&lq).map(|(a, b)| b.exp() * (b - a)).sum(),
        };
        // Rounding can leave a tiny negative value for identical inputs.
        let loss = (kl / n as f64).max(0.0);
        let op = Op::Kl {
            learner,
            tau,
            p_target: lp.iter().map(|v| v.exp()).collect(),
            q_learner: lq.iter().map(|v| v.exp()).collect(),
            direction,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[learner]))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let loss = ad.iter().zip(bd).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ad.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { a, b }, &[a, b]))
    }

    // -------------------------------------------------------------- spectral

    /// Per-plane forward transform of `[.., H, W]` into `[.., 2, H, W]`,
    /// normalised by `1/(HW)`.
    pub fn dft2(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (planes, h, w) = real_dims(&shape, "dft2")?;
        let hw = h * w;
        let norm = 1.0 / hw as f64;
        let mut plan = Plan2d::new(h, w, false);
        let xd = self.value(x).data();
        let mut out = vec![0.0; planes * 2 * hw];
        for p in 0..planes {
            let (re, im) = out[p * 2 * hw..(p + 1) * 2 * hw].split_at_mut(hw);
            re.copy_from_slice(&xd[p * hw..(p + 1) * hw]);
            plan.run(re, im);
            re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= norm);
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([2, h, w]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Dft2 { x }, &[x]))
    }

    /// Unnormalised inverse transform of `[.., 2, H, W]` to a real
    /// `[.., H, W]`; rejects spectra whose inverse is not real.
    pub fn idft2(&mut self, f: Var) -> Result<Var> {
        let shape = self.value(f).shape().to_vec();
        let (planes, h, w) = complex_dims(&shape, "idft2")?;
        let hw = h * w;
        let mut plan = Plan2d::new(h, w, true);
        let fd = self.value(f).data();
        let mut out = vec![0.0; planes * hw];
        let mut im = vec![0.0; hw];
        let mut residual = 0.0f64;
        for p in 0..planes {
            let re = &mut out[p * hw..(p + 1) * hw];
            re.copy_from_slice(&fd[p * 2 * hw..p * 2 * hw + hw]);
            im.copy_from_slice(&fd[p * 2 * hw + hw..(p + 1) * 2 * hw]);
            plan.run(re, &mut im);
            residual = im.iter().fold(residual, |m, v| m.max(v.abs()));
        }
        if residual > IMAG_RESIDUAL_TOLERANCE {
            return Err(Error::ImaginaryResidual { residual, tolerance: IMAG_RESIDUAL_TOLERANCE });
        }
        let mut out_shape = shape[..shape.len() - 3].to_vec();
        out_shape.extend([h, w]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Idft2 { f }, &[f]))
    }

    fn polar_part(&mut self, f: Var, phase: bool) -> Result<Var> {
        let op_name = if phase { "phase" } else { "amplitude" };
        let shape = self.value(f).shape().to_vec();
        let (planes, h, w) = complex_dims(&shape, op_name)?;
        let hw = h * w;
        let fd = self.value(f).data();
        let mut out = Vec::with_capacity(planes * hw);
        for p in 0..planes {
            let (re, im) = fd[p * 2 * hw..(p + 1) * 2 * hw].split_at(hw);
            out.extend(re.iter().zip(im).map(|(&r, &i)| if phase { phase_of(r, i) } else { amplitude_of(r, i) }));
        }
        let mut out_shape = shape[..shape.len() - 3].to_vec();
        out_shape.extend([h, w]);
        let value = Tensor::new(out_shape, out)?;
        let op = if phase { Op::Phase { f } } else { Op::Amplitude { f } };
        Ok(self.push(value, op, &[f]))
    }

    pub fn amplitude(&mut self, f: Var) -> Result<Var> {
        self.polar_part(f, false)
    }

    pub fn phase(&mut self, f: Var) -> Result<Var> {
        self.polar_part(f, true)
    }

    /// Polar recomposition: `re = a cos(p)`, `im = a sin(p)`.
    pub fn couple(&mut self, amplitude: Var, phase: Var) -> Result<Var> {
        self.same_shape(amplitude, phase, "couple")?;
        let shape = self.value(amplitude).shape().to_vec();
        let (planes, h, w) = real_dims(&shape, "couple")?;
        let (ad, pd) = (self.value(amplitude).data(), self.value(phase).data());
        if let Some(a) = ad.iter().find(|a| !(**a >= 0.0)) {
            return Err(Error::InvalidArgument(format!("couple: negative amplitude {a}")));
        }
        let hw = h * w;
        let mut out = vec![0.0; planes * 2 * hw];
        for p in 0..planes {
            for i in 0..hw {
                let (a, ph) = (ad[p * hw + i], pd[p * hw + i]);
                let (s, c) = ph.sin_cos();
                out[p * 2 * hw + i] = a * c;
                out[p * 2 * hw + hw + i] = a * s;
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([2, h, w]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Couple { amplitude, phase }, &[amplitude, phase]))
    }

    // --------------------------------------------------------------- layout

    /// Concatenates `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let (b, _, h, w) = self.value(first).dims4("concat")?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xb, c, xh, xw) = self.value(x).dims4("concat")?;
            if (xb, xh, xw) != (b, h, w) {
                return Err(shape_err("concat", format!("{:?} vs batch {b} at {h}x{w}", self.value(x).shape())));
            }
            channels.push(c);
        }
        let m: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * m * hw);
        for n in 0..b {
            for (&x, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(x).data()[n * c * hw..(n + 1) * c * hw]);
            }
        }
        let value = Tensor::new(vec![b, m, h, w], out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, xs))
    }

    /// Multiplies channel `m` of `x: [B, M, H, W]` by `s[b, m]` (or `s[m]`
    /// shared across the batch).
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, m, h, w) = self.value(x).dims4("scale_channels")?;
        let sl = self.value(s).len();
        if sl != m && sl != b * m {
            return Err(shape_err("scale_channels", format!("{sl} weights for {b}x{m} channels")));
        }
        let shared = sl != b * m;
        let hw = h * w;
        let (xd, sd) = (self.value(x).data(), self.value(s).data());
        let mut out = vec![0.0; xd.len()];
        for n in 0..b {
            for c in 0..m {
                let k = if shared { c } else { n * m + c };
                let base = (n * m + c) * hw;
                for i in base..base + hw {
                    out[i] = xd[i] * sd[k];
                }
            }
        }
        let value = Tensor::new(vec![b, m, h, w], out)?;
        Ok(self.push(value, Op::ScaleChannels { x, s }, &[x, s]))
    }

    /// Zero-pads `[B, C, H, W]` up to `c_out >= C` channels.
    pub fn pad_channels(&mut self, x: Var, c_out: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("pad_channels")?;
        if c_out < c {
            return Err(shape_err("pad_channels", format!("cannot pad {c} channels to {c_out}")));
        }
        let hw = h * w;
        let mut out = vec![0.0; b * c_out * hw];
        let xd = self.value(x).data();
        for n in 0..b {
            out[n * c_out * hw..(n * c_out + c) * hw].copy_from_slice(&xd[n * c * hw..(n + 1) * c * hw]);
        }
        let value = Tensor::new(vec![b, c_out, h, w], out)?;
        Ok(self.push(value, Op::PadChannels { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires one; leaves the loss does not depend on get `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => {
                    Some(Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv1x1 { x, w } => {
                let (b, cin, h, wd) = self.value(*x).dims4("conv1x1").expect("checked");
                let cout = out.shape()[1];
                let hw = h * wd;
                if let Some(gw) = self.slot(grads, *w) {
                    let xd = self.value(*x).data();
                    for n in 0..b {
                        gemm(
                            cout,
                            hw,
                            cin,
                            1.0,
                            Operand::plain(&g[n * cout * hw..(n + 1) * cout * hw]),
                            Operand::t(&xd[n * cin * hw..(n + 1) * cin * hw]),
                            1.0,
                            gw,
                        );
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let wdata = self.value(*w).data();
                    for n in 0..b {
                        gemm(
                            cin,
                            cout,
                            hw,
                            1.0,
                            Operand::t(wdata),
                            Operand::plain(&g[n * cout * hw..(n + 1) * cout * hw]),
                            1.0,
                            &mut gx[n * cin * hw..(n + 1) * cin * hw],
                        );
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let [b, c, h, w] = *out.shape() else { unreachable!() };
                let hw = h * w;
                let count = (b * hw) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for n in 0..b {
                    for ch in 0..c {
                        let base = (n * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, s)| *a += s);
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(a, s)| *a += s);
                }
                let gam = self.value(*gamma).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    for n in 0..b {
                        for ch in 0..c {
                            let base = (n * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + hw {
                                gx[i] += if *train {
                                    k * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::AvgPool { x, kh, kw } => {
                let (b, c, h, w) = self.value(*x).dims4("avg_pool").expect("checked");
                let (ho, wo) = (h / kh, w / kw);
                let inv = 1.0 / (kh * kw) as f64;
                if let Some(gx) = self.slot(grads, *x) {
                    for p in 0..b * c {
                        for r in 0..h {
                            for col in 0..w {
                                gx[p * h * w + r * w + col] += g[p * ho * wo + (r / kh) * wo + col / kw] * inv;
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).dims2("linear").expect("checked");
                let l = out.shape()[1];
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(l, n, k, 1.0, Operand::t(g), Operand::plain(self.value(*x).data()), 1.0, gw);
                }
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(n, l, k, 1.0, Operand::plain(g), Operand::plain(self.value(*w).data()), 1.0, gx);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.chunks(l) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(s, d)| *s -= d);
                }
            }
            Op::Mul { a, b } => {
                let bd = self.value(*b).data().to_vec();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                let ad = self.value(*a).data().to_vec();
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, d)| *s += c * d);
                }
            }
            Op::Mix { a, b, lambda } => {
                let l = self.value(*lambda).item();
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, d)| *s += l * d);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(s, d)| *s += (1.0 - l) * d);
                }
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let dl: f64 = g.iter().zip(ad.iter().zip(bd)).map(|(d, (x, y))| d * (x - y)).sum();
                if let Some(gl) = self.slot(grads, *lambda) {
                    gl[0] += dl;
                }
            }
            Op::Softmax { x, tau } => {
                let cols = *out.shape().last().expect("rank >= 1");
                let y = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..y.len() / cols {
                        let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += ys[j] * (gs[j] - dot) / tau;
                        }
                    }
                }
            }
            Op::Select { x, index } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx[*index] += g[0];
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&i, d) in index.iter().zip(g) {
                        gx[i] += d;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let d = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|s| *s += d);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                if let Some(gx) = self.slot(grads, *logits) {
                    let d = g[0] / n as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let ind = if j == y { 1.0 } else { 0.0 };
                            gx[i * k + j] += d * (probs[i * k + j] - ind);
                        }
                    }
                }
            }
            Op::Kl { learner, tau, p_target, q_learner, direction } => {
                let (n, k) = self.value(*learner).dims2("kl_div").expect("checked");
                if let Some(gx) = self.slot(grads, *learner) {
                    let d = g[0] / (n as f64 * tau);
                    for r in 0..n {
                        let (p, q) = (&p_target[r * k..(r + 1) * k], &q_learner[r * k..(r + 1) * k]);
                        match direction {
                            KlDirection::TargetFirst => {
                                for j in 0..k {
                                    gx[r * k + j] += d * (q[j] - p[j]);
                                }
                            }
                            KlDirection::LearnerFirst => {
                                let logs: Vec<f64> = q.iter().zip(p).map(|(a, b)| a.ln() - b.ln()).collect();
                                let row_kl: f64 = q.iter().zip(&logs).map(|(a, l)| a * l).sum();
                                for j in 0..k {
                                    gx[r * k + j] += d * q[j] * (logs[j] - row_kl);
                                }
                            }
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / ad.len() as f64;
                let diff: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| scale * (x - y)).collect();
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(&diff).for_each(|(s, d)| *s += d);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(&diff).for_each(|(s, d)| *s -= d);
                }
            }
            Op::Dft2 { x } => {
                // dL/df = Re(inverse_unnormalised(G)) / (HW).
                let (planes, h, w) = complex_dims(out.shape(), "dft2").expect("checked");
                let hw = h * w;
                if let Some(gx) = self.slot(grads, *x) {
                    let mut plan = Plan2d::new(h, w, true);
                    let (mut re, mut im) = (vec![0.0; hw], vec![0.0; hw]);
                    let norm = 1.0 / hw as f64;
                    for p in 0..planes {
                        re.copy_from_slice(&g[p * 2 * hw..p * 2 * hw + hw]);
                        im.copy_from_slice(&g[p * 2 * hw + hw..(p + 1) * 2 * hw]);
                        plan.run(&mut re, &mut im);
                        for i in 0..hw {
                            gx[p * hw + i] += re[i] * norm;
                        }
                    }
                }
            }
            Op::Idft2 { f } => {
                // f = Re(sum F e^{+i theta}) => dL/dF = forward_unnormalised(g).
                let (planes, h, w) = real_dims(out.shape(), "idft2").expect("checked");
                let hw = h * w;
                if let Some(gf) = self.slot(grads, *f) {
                    let mut plan = Plan2d::new(h, w, false);
                    let (mut re, mut im) = (vec![0.0; hw], vec![0.0; hw]);
                    for p in 0..planes {
                        re.copy_from_slice(&g[p * hw..(p + 1) * hw]);
                        im.fill(0.0);
                        plan.run(&mut re, &mut im);
                        for i in 0..hw {
                            gf[p * 2 * hw + i] += re[i];
                            gf[p * 2 * hw + hw + i] += im[i];
                        }
                    }
                }
            }
            Op::Amplitude { f } | Op::Phase { f } => {
                let is_phase = matches!(node.op, Op::Phase { .. });
                let (planes, h, w) = real_dims(out.shape(), "polar").expect("checked");
                let hw = h * w;
                let fd = self.value(*f).data();
                if let Some(gf) = self.slot(grads, *f) {
                    for p in 0..planes {
                        for i in 0..hw {
                            let (ir, ii) = (p * 2 * hw + i, p * 2 * hw + hw + i);
                            let (r, im) = (fd[ir], fd[ii]);
                            let a2 = r * r + im * im;
                            if a2 == 0.0 {
                                continue;
                            }
                            let d = g[p * hw + i];
                            if is_phase {
                                gf[ir] -= d * im / a2;
                                gf[ii] += d * r / a2;
                            } else {
                                let a = a2.sqrt();
                                gf[ir] += d * r / a;
                                gf[ii] += d * im / a;
                            }
                        }
                    }
                }
            }
            Op::Couple { amplitude, phase } => {
                let (planes, h, w) = complex_dims(out.shape(), "couple").expect("checked");
                let hw = h * w;
                let (ad, pd) = (self.value(*amplitude).data(), self.value(*phase).data());
                let mut ga_local = vec![0.0; ad.len()];
                let mut gp_local = vec![0.0; ad.len()];
                for p in 0..planes {
                    for i in 0..hw {
                        let (gr, gi) = (g[p * 2 * hw + i], g[p * 2 * hw + hw + i]);
                        let (s, c) = pd[p * hw + i].sin_cos();
                        let a = ad[p * hw + i];
                        ga_local[p * hw + i] = gr * c + gi * s;
                        gp_local[p * hw + i] = a * (gi * c - gr * s);
                        if self.fault == Some(Fault::CoupleSignFlip) {
                            gp_local[p * hw + i] = -gp_local[p * hw + i];
                        }
                    }
                }
                if let Some(ga) = self.slot(grads, *amplitude) {
                    ga.iter_mut().zip(&ga_local).for_each(|(s, d)| *s += d);
                }
                if let Some(gp) = self.slot(grads, *phase) {
                    gp.iter_mut().zip(&gp_local).for_each(|(s, d)| *s += d);
                }
            }
            Op::Concat { xs } => {
                let [b, m, h, w] = *out.shape() else { unreachable!() };
                let hw = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if let Some(gx) = self.slot(grads, x) {
                        for n in 0..b {
                            let src = &g[(n * m + offset) * hw..(n * m + offset + c) * hw];
                            gx[n * c * hw..(n + 1) * c * hw].iter_mut().zip(src).for_each(|(s, d)| *s += d);
                        }
                    }
                    offset += c;
                }
            }
            Op::ScaleChannels { x, s } => {
                let [b, m, h, w] = *out.shape() else { unreachable!() };
                let hw = h * w;
                let sl = self.value(*s).len();
                let shared = sl != b * m;
                let (xd, sd) = (self.value(*x).data(), self.value(*s).data());
                let mut gs_local = vec![0.0; sl];
                for n in 0..b {
                    for c in 0..m {
                        let k = if shared { c } else { n * m + c };
                        let base = (n * m + c) * hw;
                        gs_local[k] += (base..base + hw).map(|i| g[i] * xd[i]).sum::<f64>();
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for n in 0..b {
                        for c in 0..m {
                            let k = if shared { c } else { n * m + c };
                            let base = (n * m + c) * hw;
                            for i in base..base + hw {
                                gx[i] += g[i] * sd[k];
                            }
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    gs.iter_mut().zip(&gs_local).for_each(|(a, d)| *a += d);
                }
            }
            Op::PadChannels { x } => {
                let (b, c, h, w) = self.value(*x).dims4("pad_channels").expect("checked");
                let c_out = out.shape()[1];
                let hw = h * w;
                if let Some(gx) = self.slot(grads, *x) {
                    for n in 0..b {
                        let src = &g[n * c_out * hw..(n * c_out + c) * hw];
                        gx[n * c * hw..(n + 1) * c * hw].iter_mut().zip(src).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
            }
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Stand-alone `softmax(logits / tau)` of one vector.
pub fn softmax_t(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    Ok(softmax_rows(logits, logits.len(), tau))
}
