use std::fmt;
use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map with a known adjoint, recorded on the tape as one node.
///
/// The backward rule of `apply` is `apply_adjoint` and vice versa, so an
/// implementation only has to get the adjoint pairing right.
pub trait LinearOperator: Send + Sync {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    L1Norm(Var),
    L2NormSq(Var),
    Relu(Var),
    Logistic(Var),
    Exp(Var),
    SoftmaxChannels(Var),
    AvgPool { x: Var, size: usize },
    Upsample { x: Var, size: usize },
    SoftThreshold { x: Var, tau: Var },
    Conv2d { x: Var, kernel: Var, bias: Var, geom: ConvGeometry },
    ScaleBy { x: Var, s: Var },
    Broadcast(Var),
    ChannelSlice { x: Var, channel: usize },
    MulChannel { x: Var, w: Var },
    Linear { x: Var, map: Arc<dyn LinearOperator>, adjoint: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::L1Norm(_) => "l1_norm",
            Op::L2NormSq(_) => "l2_norm_sq",
            Op::Relu(_) => "relu",
            Op::Logistic(_) => "logistic",
            Op::Exp(_) => "exp",
            Op::SoftmaxChannels(_) => "softmax_over_channels",
            Op::AvgPool { .. } => "avg_pool",
            Op::Upsample { .. } => "nearest_upsample",
            Op::SoftThreshold { .. } => "soft_threshold",
            Op::Conv2d { .. } => "conv2d",
            Op::ScaleBy { .. } => "scale_by",
            Op::Broadcast(_) => "broadcast",
            Op::ChannelSlice { .. } => "channel_slice",
            Op::MulChannel { .. } => "mul_channel",
            Op::Linear { .. } => "linear",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records executed ops in order; node inputs always precede the node.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    check_finite: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).field("backward_done", &self.backward_done).finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Non-finite checks after every op are on in debug builds.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false, check_finite: cfg!(debug_assertions) }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is populated by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient accumulated by the last backward pass, if `v` took part in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.node(*v).requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, op, &[a, b])
    }

    fn reduce(&mut self, x: Var, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var> {
        let v = f(self.value(x).data());
        self.push(Tensor::scalar(v), op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Abs(x), f64::abs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn logistic(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Logistic(x), logistic)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Op::Sum(x), |d| d.iter().sum())
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Op::Mean(x), |d| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Op::L1Norm(x), |d| d.iter().map(|v| v.abs()).sum())
    }

    pub fn l2_norm_sq(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Op::L2NormSq(x), |d| d.iter().map(|v| v * v).sum())
    }

    /// `sgn(x) * max(|x| - tau, 0)` elementwise; `tau` must be nonnegative and shaped like `x`.
    pub fn soft_threshold(&mut self, x: Var, tau: Var) -> Result<Var> {
        self.same_shape(x, tau, "soft_threshold")?;
        if let Some(t) = self.value(tau).data().iter().find(|t| **t < 0.0) {
            return Err(Error::domain(format!("soft_threshold with negative threshold {t}")));
        }
        self.zip(x, tau, Op::SoftThreshold { x, tau }, |v, t| sgn(v) * (v.abs() - t).max(0.0))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(kernel), padding)?;
        if self.shape(bias) != [geom.out_channels] {
            return Err(Error::dim(format!(
                "conv2d bias shape {:?}, expected [{}]",
                self.shape(bias),
                geom.out_channels
            )));
        }
        let out = conv2d_forward(&geom, self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        self.push(Tensor::from_parts(geom.out_shape().to_vec(), out), Op::Conv2d { x, kernel, bias, geom }, &[x, kernel, bias])
    }

    /// Per-location softmax over axis 1 of a `[B, N, H, W]` tensor.
    pub fn softmax_over_channels(&mut self, x: Var) -> Result<Var> {
        let (b, n, h, w) = self.value(x).dims4()?;
        if n == 0 {
            return Err(Error::dim("softmax over zero channels"));
        }
        let src = self.value(x).data();
        let plane = h * w;
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            let base = bi * n * plane;
            for p in 0..plane {
                let at = |c: usize| base + c * plane + p;
                let max = (0..n).map(|c| src[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for c in 0..n {
                    let e = (src[at(c)] - max).exp();
                    out[at(c)] = e;
                    total += e;
                }
                for c in 0..n {
                    out[at(c)] /= total;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::SoftmaxChannels(x), &[x])
    }

    /// Non-overlapping mean pooling with stride `size`; edge windows average their valid extent.
    pub fn avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        if size == 0 {
            return Err(Error::domain("avg_pool with zero window"));
        }
        let (b, c, h, w) = self.value(x).dims4()?;
        let (ph, pw) = (h.div_ceil(size), w.div_ceil(size));
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * ph * pw];
        for bc in 0..b * c {
            let plane = &src[bc * h * w..(bc + 1) * h * w];
            for py in 0..ph {
                let rows = py * size..((py + 1) * size).min(h);
                for px in 0..pw {
                    let cols = px * size..((px + 1) * size).min(w);
                    let count = (rows.len() * cols.len()) as f64;
                    let total: f64 = rows.clone().map(|y| plane[y * w + cols.start..y * w + cols.end].iter().sum::<f64>()).sum();
                    out[(bc * ph + py) * pw + px] = total / count;
                }
            }
        }
        self.push(Tensor::from_parts(vec![b, c, ph, pw], out), Op::AvgPool { x, size }, &[x])
    }

    /// Broadcasts each pooled cell back over the `size x size` region it summarizes.
    pub fn nearest_upsample(&mut self, x: Var, height: usize, width: usize, size: usize) -> Result<Var> {
        if size == 0 {
            return Err(Error::domain("nearest_upsample with zero window"));
        }
        let (b, c, h, w) = self.value(x).dims4()?;
        if h != height.div_ceil(size) || w != width.div_ceil(size) {
            return Err(Error::dim(format!(
                "cannot upsample {h}x{w} to {height}x{width} with window {size}"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * height * width];
        for bc in 0..b * c {
            for y in 0..height {
                for x_ in 0..width {
                    out[(bc * height + y) * width + x_] = src[(bc * h + y / size) * w + x_ / size];
                }
            }
        }
        self.push(Tensor::from_parts(vec![b, c, height, width], out), Op::Upsample { x, size }, &[x])
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item()?;
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| c * v).collect());
        self.push(out, Op::ScaleBy { x, s }, &[x, s])
    }

    /// Repeats a one-element tensor over `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).item()?;
        self.push(Tensor::full(shape.to_vec(), v), Op::Broadcast(x), &[x])
    }

    /// Channel `channel` of a `[B, C, H, W]` tensor as `[B, 1, H, W]`.
    pub fn channel_slice(&mut self, x: Var, channel: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if channel >= c {
            return Err(Error::dim(format!("channel {channel} out of range for {c} channels")));
        }
        let src = self.value(x).data();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * plane);
        for bi in 0..b {
            let start = (bi * c + channel) * plane;
            out.extend_from_slice(&src[start..start + plane]);
        }
        self.push(Tensor::from_parts(vec![b, 1, h, w], out), Op::ChannelSlice { x, channel }, &[x])
    }

    /// `x[b, c] * w[b, 0]` for `x: [B, C, H, W]`, `w: [B, 1, H, W]`.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, c, h, wd) = self.value(x).dims4()?;
        if self.shape(w) != [b, 1, h, wd] {
            return Err(Error::dim(format!("mul_channel weight shape {:?} vs input {:?}", self.shape(w), self.shape(x))));
        }
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        let plane = h * wd;
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            let wp = &ws[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for p in 0..plane {
                    out[base + p] = xs[base + p] * wp[p];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::MulChannel { x, w }, &[x, w])
    }

    /// Applies a fixed linear map (or its adjoint).
    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearOperator>, adjoint: bool) -> Result<Var> {
        let out = if adjoint { map.apply_adjoint(self.value(x))? } else { map.apply(self.value(x))? };
        self.push(out, Op::Linear { x, map, adjoint }, &[x])
    }

    /// Reverse pass from a one-element `loss`, populating gradients of every
    /// node that depends on a variable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this tape; reset_grads first".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.node(loss).requires_grad {
            return Err(Error::Graph("loss does not depend on any variable (detached graph)".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut send = |target: Var, contribution: Vec<f64>| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(&contribution) {
                        *a += c;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_parts(self.shape(target).to_vec(), contribution));
                }
            }
        };
        let xval = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                send(*a, gd.iter().zip(xval(*b)).map(|(g, y)| g * y).collect());
                send(*b, gd.iter().zip(xval(*a)).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, c) => send(*x, gd.iter().map(|g| g * c).collect()),
            Op::Abs(x) | Op::L1Norm(x) => {
                let g0 = gd[0];
                let scalar = matches!(node.op, Op::L1Norm(_));
                let contribution = xval(*x)
                    .iter()
                    .enumerate()
                    .map(|(k, v)| sgn(*v) * if scalar { g0 } else { gd[k] })
                    .collect();
                send(*x, contribution);
            }
            Op::Sum(x) => send(*x, vec![gd[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![gd[0] / n as f64; n]);
            }
            Op::L2NormSq(x) => send(*x, xval(*x).iter().map(|v| 2.0 * v * gd[0]).collect()),
            Op::Relu(x) => send(*x, xval(*x).iter().zip(gd).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect()),
            Op::Logistic(x) => {
                let y = node.value.data();
                send(*x, y.iter().zip(gd).map(|(y, g)| y * (1.0 - y) * g).collect());
            }
            Op::Exp(x) => {
                let y = node.value.data();
                send(*x, y.iter().zip(gd).map(|(y, g)| y * g).collect());
            }
            Op::SoftmaxChannels(x) => {
                let (b, n, h, w) = node.value.dims4()?;
                let y = node.value.data();
                let plane = h * w;
                let mut dx = vec![0.0; y.len()];
                for bi in 0..b {
                    let base = bi * n * plane;
                    for p in 0..plane {
                        let dot: f64 = (0..n).map(|c| y[base + c * plane + p] * gd[base + c * plane + p]).sum();
                        for c in 0..n {
                            let k = base + c * plane + p;
                            dx[k] = y[k] * (gd[k] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::AvgPool { x, size } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let (ph, pw) = (h.div_ceil(*size), w.div_ceil(*size));
                let mut dx = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    for y in 0..h {
                        let py = y / size;
                        let rows = (((py + 1) * size).min(h) - py * size) as f64;
                        for x_ in 0..w {
                            let px = x_ / size;
                            let cols = (((px + 1) * size).min(w) - px * size) as f64;
                            dx[(bc * h + y) * w + x_] = gd[(bc * ph + py) * pw + px] / (rows * cols);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Upsample { x, size } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let (_, _, height, width) = node.value.dims4()?;
                let mut dx = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    for y in 0..height {
                        for x_ in 0..width {
                            dx[(bc * h + y / size) * w + x_ / size] += gd[(bc * height + y) * width + x_];
                        }
                    }
                }
                send(*x, dx);
            }
            Op::SoftThreshold { x, tau } => {
                let (xs, ts) = (xval(*x), xval(*tau));
                let active = |k: usize| xs[k].abs() > ts[k];
                send(*x, (0..xs.len()).map(|k| if active(k) { gd[k] } else { 0.0 }).collect());
                send(*tau, (0..xs.len()).map(|k| if active(k) { -sgn(xs[k]) * gd[k] } else { 0.0 }).collect());
            }
            Op::Conv2d { x, kernel, bias, geom } => {
                let need_input = self.nodes[x.0].requires_grad;
                let need_params = self.nodes[kernel.0].requires_grad || self.nodes[bias.0].requires_grad;
                let (dx, dk, db) = conv2d_backward(geom, xval(*x), xval(*kernel), gd, need_input, need_params);
                if need_input {
                    send(*x, dx);
                }
                if need_params {
                    send(*kernel, dk);
                    send(*bias, db);
                }
            }
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).item()?;
                send(*x, gd.iter().map(|g| g * c).collect());
                let ds: f64 = gd.iter().zip(xval(*x)).map(|(g, v)| g * v).sum();
                send(*s, vec![ds]);
            }
            Op::Broadcast(x) => send(*x, vec![gd.iter().sum()]),
            Op::ChannelSlice { x, channel } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let mut dx = vec![0.0; b * c * plane];
                for bi in 0..b {
                    let start = (bi * c + channel) * plane;
                    dx[start..start + plane].copy_from_slice(&gd[bi * plane..(bi + 1) * plane]);
                }
                send(*x, dx);
            }
            Op::MulChannel { x, w } => {
                let (b, c, h, wd) = self.value(*x).dims4()?;
                let (xs, ws) = (xval(*x), xval(*w));
                let plane = h * wd;
                let mut dx = vec![0.0; xs.len()];
                let mut dw = vec![0.0; ws.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        for p in 0..plane {
                            dx[base + p] = gd[base + p] * ws[bi * plane + p];
                            dw[bi * plane + p] += gd[base + p] * xs[base + p];
                        }
                    }
                }
                send(*x, dx);
                send(*w, dw);
            }
            Op::Linear { x, map, adjoint } => {
                let back = if *adjoint { map.apply(g)? } else { map.apply_adjoint(g)? };
                if back.shape() != self.shape(*x) {
                    return Err(Error::dim("linear operator adjoint returned a mismatched shape"));
                }
                send(*x, back.into_data());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &k));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 4, 5], |i| i as f64 * 0.1));
        let k = tape.constant(Tensor::zeros(vec![2, 3, 3, 3]));
        let b = tape.constant(t(&[2], &[0.25, -1.5]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[2, 2, 4, 5]);
        for (i, val) in v.data().iter().enumerate() {
            let o = (i / 20) % 2;
            assert_eq!(*val, if o == 0 { 0.25 } else { -1.5 });
        }
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv2d(x, k, b, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_values_and_zero_grad_for_negatives() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[-1.0, -2.0, -0.5]));
        let y = tape.relu(x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn logistic_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0, 1.3, -2.7, 9.0]));
        let nx = tape.scale(x, -1.0).unwrap();
        let y = tape.logistic(x).unwrap();
        let ny = tape.logistic(nx).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ny).data()) {
            assert!((a - (1.0 - b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 1, 1]));
        let y = tape.softmax_over_channels(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = tape.constant(t(&[1, 3, 1, 2], &[0.1, -2.0, 3.0, 0.5, 7.0, 1.0]));
        let b = tape.constant(t(&[1, 3, 1, 2], &[100.1, 98.0, 103.0, 100.5, 107.0, 101.0]));
        let ya = tape.softmax_over_channels(a).unwrap();
        let yb = tape.softmax_over_channels(b).unwrap();
        for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn avg_pool_examples() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let p = tape.avg_pool(ones, 2).unwrap();
        assert_eq!(tape.shape(p), &[1, 1, 2, 2]);
        assert!(tape.value(p).data().iter().all(|v| *v == 1.0));
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.avg_pool(x, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
    }

    #[test]
    fn upsample_block_constant_and_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let u = tape.nearest_upsample(x, 4, 4, 2).unwrap();
        let expect = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(tape.value(u).data(), &expect);
        let same = tape.nearest_upsample(x, 2, 2, 1).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());
        assert!(matches!(tape.nearest_upsample(x, 5, 5, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn soft_threshold_table_and_domain() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[2.0, -2.0, 0.3]));
        let tau = tape.constant(Tensor::full(vec![3], 0.5));
        let y = tape.soft_threshold(x, tau).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -1.5, 0.0]);
        let bad = tape.constant(t(&[3], &[0.5, -0.1, 0.5]));
        assert!(matches!(tape.soft_threshold(x, bad), Err(Error::Domain(_))));
    }

    #[test]
    fn norms() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, -2.0, 3.0]));
        let l1 = tape.l1_norm(x).unwrap();
        assert_eq!(tape.value(l1).item().unwrap(), 6.0);
        let y = tape.constant(t(&[2], &[3.0, 4.0]));
        let l2 = tape.l2_norm_sq(y).unwrap();
        assert_eq!(tape.value(l2).item().unwrap(), 25.0);
    }

    #[test]
    fn backward_basic_and_errors() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[0.3, -4.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(matches!(tape.backward(s), Err(Error::Graph(_))));
        tape.reset_grads();
        tape.backward(s).unwrap();

        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        let l = tape.l2_norm_sq(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);

        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Graph(_))));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Graph(_))));
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[1.5, -0.5]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        // d/dx 2x^2 = 4x
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn non_finite_detected_when_checking() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite(_))));
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }
}
