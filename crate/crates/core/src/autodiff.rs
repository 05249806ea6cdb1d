//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; node inputs always have
//! smaller indices than the node itself, so walking the tape backwards is a
//! valid reverse topological order. A tape belongs to one thread from the
//! first forward op through [`Tape::backward`].
//!
//! Only the operations the survival network needs are provided: 3D
//! convolution, leaky ReLU, batch normalization, linear layers, channel
//! broadcast addition, log-sum-exp pooling, sigmoid, and the handful of
//! elementwise and reduction ops used by the losses.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{Mode, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
}

impl ConvGeometry {
    fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }
}

/// Output positions `o` along one axis for which `o*stride + k - padding`
/// lands inside the input.
fn valid_range(k: usize, in_len: usize, out_len: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    if in_len + padding <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + padding - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BroadcastAdd {
        volume: Var,
        offsets: Var,
    },
    LsePool(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    ScaleLastAxis(Var, Vec<f64>),
    AdjacentDiff(Var),
    SpatialMean(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics observed by a train-mode batch-norm pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f64>,
}

/// Running statistics and hyperparameters of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
    }
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A constant input; gradients are not tracked for it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn with_value<R>(&self, var: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[var.0].value)
    }

    pub fn conv3d(&self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = {
            let nodes = self.nodes.borrow();
            let xs = nodes[input.0].value.shape();
            let ks = nodes[kernel.0].value.shape();
            let bs = nodes[bias.0].value.shape();
            if xs.len() != 5 || ks.len() != 5 {
                return Err(Error::shape(
                    "conv3d",
                    format!("input {xs:?} and kernel {ks:?} must both be rank 5"),
                ));
            }
            if xs[1] != ks[1] {
                return Err(Error::shape(
                    "conv3d",
                    format!(
                        "input {xs:?} has {} channels but kernel {ks:?} expects {}",
                        xs[1], ks[1]
                    ),
                ));
            }
            if ks[2] != ks[3] || ks[3] != ks[4] {
                return Err(Error::shape("conv3d", format!("kernel {ks:?} is not cubic")));
            }
            if bs != [ks[0]] {
                return Err(Error::shape(
                    "conv3d",
                    format!("bias {bs:?} does not match kernel {ks:?}"),
                ));
            }
            if stride == 0 {
                return Err(Error::InvalidArgument("conv3d stride must be >= 1".into()));
            }
            let k = ks[2];
            let mut out_dims = [0; 3];
            for (axis, out) in out_dims.iter_mut().enumerate() {
                let len = xs[2 + axis] + 2 * padding;
                if k > len {
                    return Err(Error::shape(
                        "conv3d",
                        format!("kernel {ks:?} larger than padded input {xs:?} (padding {padding})"),
                    ));
                }
                *out = (len - k) / stride + 1;
            }
            ConvGeometry {
                batch: xs[0],
                in_channels: xs[1],
                out_channels: ks[0],
                kernel: k,
                stride,
                padding,
                in_dims: [xs[2], xs[3], xs[4]],
                out_dims,
            }
        };
        let out = {
            let nodes = self.nodes.borrow();
            conv3d_forward(
                nodes[input.0].value.data(),
                nodes[kernel.0].value.data(),
                nodes[bias.0].value.data(),
                &geom,
            )
        };
        let shape = vec![
            geom.batch,
            geom.out_channels,
            geom.out_dims[0],
            geom.out_dims[1],
            geom.out_dims[2],
        ];
        let rg = self.needs_grad(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&self, input: Var, slope: f64) -> Var {
        let value = self.with_value(input, |x| x.map(|v| if v >= 0.0 { v } else { slope * v }));
        let rg = self.needs_grad(&[input]);
        self.push(value, Op::LeakyRelu { input, slope }, rg)
    }

    /// Batch normalization that also folds train-mode statistics into `state`.
    pub fn batch_norm(&self, input: Var, gamma: Var, beta: Var, state: &mut BatchNormState) -> Result<Var> {
        let (out, stats) = self.batch_norm_with(input, gamma, beta, state)?;
        if let Some(stats) = stats {
            state.update(&stats);
        }
        Ok(out)
    }

    /// Batch normalization that leaves `state` untouched and returns the
    /// observed batch statistics in train mode.
    pub fn batch_norm_with(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (value, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let g = nodes[gamma.0].value.data();
            let b = nodes[beta.0].value.data();
            let xs = x.shape();
            if xs.len() < 2 {
                return Err(Error::shape("batch_norm", format!("input {xs:?} needs rank >= 2")));
            }
            let (batch, channels) = (xs[0], xs[1]);
            if g.len() != channels || b.len() != channels || state.channels() != channels {
                return Err(Error::shape(
                    "batch_norm",
                    format!(
                        "input {xs:?} has {channels} channels; gamma {}, beta {}, state {}",
                        g.len(),
                        b.len(),
                        state.channels()
                    ),
                ));
            }
            if state.mode == Mode::Train && batch < 2 {
                return Err(Error::InvalidArgument(
                    "batch_norm in train mode needs a batch of at least 2".into(),
                ));
            }
            let spatial = x.inner_size(2);
            let count = (batch * spatial) as f64;
            let data = x.data();
            let mut xhat = vec![0.0; data.len()];
            let mut inv_std = vec![0.0; channels];
            let mut stats = BatchStats {
                mean: vec![0.0; channels],
                var: vec![0.0; channels],
            };
            for c in 0..channels {
                let (mean, var) = match state.mode {
                    Mode::Train => {
                        let mut sum = 0.0;
                        for bi in 0..batch {
                            let off = (bi * channels + c) * spatial;
                            sum += data[off..off + spatial].iter().sum::<f64>();
                        }
                        let mean = sum / count;
                        let mut ss = 0.0;
                        for bi in 0..batch {
                            let off = (bi * channels + c) * spatial;
                            ss += data[off..off + spatial]
                                .iter()
                                .map(|v| (v - mean) * (v - mean))
                                .sum::<f64>();
                        }
                        stats.mean[c] = mean;
                        stats.var[c] = ss / (count - 1.0);
                        (mean, ss / count)
                    }
                    Mode::Eval => (state.running_mean[c], state.running_var[c]),
                };
                let is = 1.0 / (var + state.epsilon).sqrt();
                inv_std[c] = is;
                for bi in 0..batch {
                    let off = (bi * channels + c) * spatial;
                    for i in off..off + spatial {
                        xhat[i] = (data[i] - mean) * is;
                    }
                }
            }
            let mut out = vec![0.0; data.len()];
            for bi in 0..batch {
                for c in 0..channels {
                    let off = (bi * channels + c) * spatial;
                    for i in off..off + spatial {
                        out[i] = g[c] * xhat[i] + b[c];
                    }
                }
            }
            let stats = (state.mode == Mode::Train).then_some(stats);
            (Tensor::new(xs.to_vec(), out)?, xhat, inv_std, stats)
        };
        let rg = self.needs_grad(&[input, gamma, beta]);
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode: state.mode,
            },
            rg,
        );
        Ok((var, stats))
    }

    pub fn linear(&self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let w = &nodes[weight.0].value;
            let b = &nodes[bias.0].value;
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.shape() != [ws[0]] {
                return Err(Error::shape(
                    "linear",
                    format!("input {xs:?}, weight {ws:?}, bias {:?}", b.shape()),
                ));
            }
            let (batch, din, dout) = (xs[0], xs[1], ws[0]);
            let (xd, wd, bd) = (x.data(), w.data(), b.data());
            let mut out = vec![0.0; batch * dout];
            for r in 0..batch {
                let row = &xd[r * din..(r + 1) * din];
                for o in 0..dout {
                    let wrow = &wd[o * din..(o + 1) * din];
                    out[r * dout + o] = bd[o] + row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Tensor::new([batch, dout], out)?
        };
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Adds `offsets[b, q]` to every spatial location of `volume[b, q, ..]`.
    pub fn broadcast_add(&self, volume: Var, offsets: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let f = &nodes[volume.0].value;
            let s = &nodes[offsets.0].value;
            let (fs, ss) = (f.shape(), s.shape());
            if fs.len() < 3 || ss.len() != 2 || fs[..2] != ss[..] {
                return Err(Error::shape(
                    "broadcast_add",
                    format!("volume {fs:?} vs offsets {ss:?}"),
                ));
            }
            let spatial = f.inner_size(2);
            let mut out = f.data().to_vec();
            for (chunk, &o) in out.chunks_mut(spatial).zip(s.data()) {
                chunk.iter_mut().for_each(|v| *v += o);
            }
            Tensor::new(fs.to_vec(), out)?
        };
        let rg = self.needs_grad(&[volume, offsets]);
        Ok(self.push(value, Op::BroadcastAdd { volume, offsets }, rg))
    }

    /// Log-sum-exp over all spatial positions: `[B, N, ...] -> [B, N]`.
    pub fn lse_pool(&self, input: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let xs = x.shape();
            if xs.len() < 3 {
                return Err(Error::shape("lse_pool", format!("input {xs:?} needs rank >= 3")));
            }
            let spatial = x.inner_size(2);
            let out = x.data().chunks(spatial).map(log_sum_exp).collect();
            Tensor::new([xs[0], xs[1]], out)?
        };
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, Op::LsePool(input), rg))
    }

    /// Mean over all spatial positions: `[B, C, ...] -> [B, C]`.
    pub fn spatial_mean(&self, input: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let xs = x.shape();
            if xs.len() < 3 {
                return Err(Error::shape("spatial_mean", format!("input {xs:?} needs rank >= 3")));
            }
            let spatial = x.inner_size(2);
            let out = x
                .data()
                .chunks(spatial)
                .map(|c| c.iter().sum::<f64>() / spatial as f64)
                .collect();
            Tensor::new([xs[0], xs[1]], out)?
        };
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, Op::SpatialMean(input), rg))
    }

    pub fn sigmoid(&self, input: Var) -> Var {
        let value = self.with_value(input, |x| x.map(sigmoid));
        let rg = self.needs_grad(&[input]);
        self.push(value, Op::Sigmoid(input), rg)
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |p, q| p + q)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |p, q| p - q)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |p, q| p * q)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&self, input: Var, factor: f64) -> Var {
        let value = self.with_value(input, |x| x.map(|v| v * factor));
        let rg = self.needs_grad(&[input]);
        self.push(value, Op::Scale(input, factor), rg)
    }

    pub fn add_scalar(&self, input: Var, offset: f64) -> Var {
        let value = self.with_value(input, |x| x.map(|v| v + offset));
        let rg = self.needs_grad(&[input]);
        self.push(value, Op::AddScalar(input), rg)
    }

    pub fn abs(&self, input: Var) -> Var {
        let value = self.with_value(input, |x| x.map(f64::abs));
        let rg = self.needs_grad(&[input]);
        self.push(value, Op::Abs(input), rg)
    }

    /// `max(0, x)` with subgradient 0 at the kink.
    pub fn relu(&self, input: Var) -> Var {
        let value = self.with_value(input, |x| x.map(|v| v.max(0.0)));
        let rg = self.needs_grad(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn sum(&self, input: Var) -> Var {
        let value = self.with_value(input, |x| Tensor::scalar(x.data().iter().sum()));
        let rg = self.needs_grad(&[input]);
        self.push(value, Op::Sum(input), rg)
    }

    pub fn mean(&self, input: Var) -> Var {
        let value = self.with_value(input, |x| {
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        });
        let rg = self.needs_grad(&[input]);
        self.push(value, Op::Mean(input), rg)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last_axis(&self, input: Var) -> Result<Var> {
        let value = self.with_value(input, |x| {
            let shape = x.shape();
            let Some((&last, lead)) = shape.split_last() else {
                return Err(Error::shape("sum_last_axis", "input is a scalar"));
            };
            let out = x.data().chunks(last).map(|c| c.iter().sum()).collect();
            Tensor::new(lead.to_vec(), out)
        })?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, Op::SumLastAxis(input), rg))
    }

    /// Multiplies entry `n` of the last axis by `weights[n]`.
    pub fn scale_last_axis(&self, input: Var, weights: &[f64]) -> Result<Var> {
        let value = self.with_value(input, |x| {
            if x.shape().last() != Some(&weights.len()) {
                return Err(Error::shape(
                    "scale_last_axis",
                    format!("input {:?} vs {} weights", x.shape(), weights.len()),
                ));
            }
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_mut(weights.len()) {
                chunk.iter_mut().zip(weights).for_each(|(v, w)| *v *= w);
            }
            Ok(out)
        })?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, Op::ScaleLastAxis(input, weights.to_vec()), rg))
    }

    /// `out[.., n] = x[.., n + 1] - x[.., n]` along the last axis.
    pub fn adjacent_diff(&self, input: Var) -> Result<Var> {
        let value = self.with_value(input, |x| {
            let shape = x.shape();
            match shape.last() {
                Some(&n) if n >= 2 => {
                    let out = x
                        .data()
                        .chunks(n)
                        .flat_map(|c| c.windows(2).map(|w| w[1] - w[0]))
                        .collect();
                    let mut s = shape.to_vec();
                    *s.last_mut().unwrap() = n - 1;
                    Tensor::new(s, out)
                }
                _ => Err(Error::shape(
                    "adjacent_diff",
                    format!("input {shape:?} needs a last axis of length >= 2"),
                )),
            }
        })?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, Op::AdjacentDiff(input), rg))
    }

    pub fn reshape(&self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.with_value(input, |x| x.clone().reshape(shape))?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Reverse pass from a scalar. Gradients are computed from scratch on
    /// every call, so repeated calls never accumulate into stale values.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut push = |var: Var, delta: Vec<f64>| {
                if !nodes[var.0].requires_grad {
                    return;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv3d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let (dx, dw, db) = conv3d_backward(val(*input), val(*kernel), &g, geom);
                    push(*input, dx);
                    push(*kernel, dw);
                    push(*bias, db);
                }
                Op::LeakyRelu { input, slope } => {
                    let d = val(*input)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
                        .collect();
                    push(*input, d);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let shape = nodes[input.0].value.shape();
                    let (batch, channels) = (shape[0], shape[1]);
                    let spatial = nodes[input.0].value.inner_size(2);
                    let gm = val(*gamma);
                    let count = (batch * spatial) as f64;
                    let mut dgamma = vec![0.0; channels];
                    let mut dbeta = vec![0.0; channels];
                    for bi in 0..batch {
                        for c in 0..channels {
                            let off = (bi * channels + c) * spatial;
                            for i in off..off + spatial {
                                dgamma[c] += g[i] * xhat[i];
                                dbeta[c] += g[i];
                            }
                        }
                    }
                    let mut dx = vec![0.0; g.len()];
                    for bi in 0..batch {
                        for c in 0..channels {
                            let off = (bi * channels + c) * spatial;
                            for i in off..off + spatial {
                                dx[i] = match mode {
                                    Mode::Train => {
                                        gm[c] * inv_std[c] / count * (count * g[i] - dbeta[c] - xhat[i] * dgamma[c])
                                    }
                                    Mode::Eval => gm[c] * inv_std[c] * g[i],
                                };
                            }
                        }
                    }
                    push(*input, dx);
                    push(*gamma, dgamma);
                    push(*beta, dbeta);
                }
                Op::Linear { input, weight, bias } => {
                    let ws = nodes[weight.0].value.shape();
                    let (dout, din) = (ws[0], ws[1]);
                    let batch = g.len() / dout;
                    let (x, w) = (val(*input), val(*weight));
                    let mut dx = vec![0.0; batch * din];
                    let mut dw = vec![0.0; dout * din];
                    let mut db = vec![0.0; dout];
                    for r in 0..batch {
                        for o in 0..dout {
                            let go = g[r * dout + o];
                            db[o] += go;
                            for i in 0..din {
                                dx[r * din + i] += go * w[o * din + i];
                                dw[o * din + i] += go * x[r * din + i];
                            }
                        }
                    }
                    push(*input, dx);
                    push(*weight, dw);
                    push(*bias, db);
                }
                Op::BroadcastAdd { volume, offsets } => {
                    let spatial = nodes[volume.0].value.inner_size(2);
                    let ds = g.chunks(spatial).map(|c| c.iter().sum()).collect();
                    push(*offsets, ds);
                    push(*volume, g);
                }
                Op::LsePool(input) => {
                    let x = val(*input);
                    let spatial = nodes[input.0].value.inner_size(2);
                    let out = node.value.data();
                    let mut dx = vec![0.0; x.len()];
                    for (j, (&go, &o)) in g.iter().zip(out).enumerate() {
                        for i in j * spatial..(j + 1) * spatial {
                            dx[i] = go * (x[i] - o).exp();
                        }
                    }
                    push(*input, dx);
                }
                Op::SpatialMean(input) => {
                    let spatial = nodes[input.0].value.inner_size(2);
                    let dx = g
                        .iter()
                        .flat_map(|&go| std::iter::repeat_n(go / spatial as f64, spatial))
                        .collect();
                    push(*input, dx);
                }
                Op::Sigmoid(input) => {
                    let y = node.value.data();
                    let d = y.iter().zip(&g).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                    push(*input, d);
                }
                Op::Add(a, b) => {
                    push(*a, g.clone());
                    push(*b, g);
                }
                Op::Sub(a, b) => {
                    push(*b, g.iter().map(|v| -v).collect());
                    push(*a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    push(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                    push(*b, g.iter().zip(x).map(|(g, x)| g * x).collect());
                }
                Op::Scale(input, factor) => push(*input, g.iter().map(|v| v * factor).collect()),
                Op::AddScalar(input) => push(*input, g),
                Op::Abs(input) => {
                    let d = val(*input)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &g)| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    push(*input, d);
                }
                Op::Relu(input) => {
                    let d = val(*input)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    push(*input, d);
                }
                Op::Sum(input) => {
                    let n = nodes[input.0].value.numel();
                    push(*input, vec![g[0]; n]);
                }
                Op::Mean(input) => {
                    let n = nodes[input.0].value.numel();
                    push(*input, vec![g[0] / n as f64; n]);
                }
                Op::SumLastAxis(input) => {
                    let last = *nodes[input.0].value.shape().last().unwrap();
                    let d = g.iter().flat_map(|&v| std::iter::repeat_n(v, last)).collect();
                    push(*input, d);
                }
                Op::ScaleLastAxis(input, weights) => {
                    let mut d = g;
                    for chunk in d.chunks_mut(weights.len()) {
                        chunk.iter_mut().zip(weights).for_each(|(v, w)| *v *= w);
                    }
                    push(*input, d);
                }
                Op::AdjacentDiff(input) => {
                    let n = *nodes[input.0].value.shape().last().unwrap();
                    let rows = g.len() / (n - 1);
                    let mut d = vec![0.0; rows * n];
                    for r in 0..rows {
                        for j in 0..n - 1 {
                            let gv = g[r * (n - 1) + j];
                            d[r * n + j + 1] += gv;
                            d[r * n + j] -= gv;
                        }
                    }
                    push(*input, d);
                }
                Op::Reshape(input) => push(*input, g),
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                g.and_then(|g| match node.op {
                    Op::Leaf if node.requires_grad => Tensor::new(node.value.shape().to_vec(), g).ok(),
                    _ => None,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Numerically stable `ln(sum(exp(x)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv3d_forward(x: &[f64], w: &[f64], b: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let &ConvGeometry {
        batch,
        in_channels,
        out_channels,
        kernel: k,
        stride: s,
        padding: p,
        in_dims: [id, ih, iw],
        out_dims: [od, oh, ow],
    } = geom;
    let (in_vol, out_vol) = (geom.in_volume(), geom.out_volume());
    let mut out = vec![0.0; batch * out_channels * out_vol];
    for bi in 0..batch {
        for co in 0..out_channels {
            let o = &mut out[(bi * out_channels + co) * out_vol..][..out_vol];
            o.fill(b[co]);
            for ci in 0..in_channels {
                let xin = &x[(bi * in_channels + ci) * in_vol..][..in_vol];
                let wk = &w[(co * in_channels + ci) * k * k * k..][..k * k * k];
                for kz in 0..k {
                    let (z0, z1) = valid_range(kz, id, od, s, p);
                    for ky in 0..k {
                        let (y0, y1) = valid_range(ky, ih, oh, s, p);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(kx, iw, ow, s, p);
                            let wv = wk[(kz * k + ky) * k + kx];
                            for oz in z0..z1 {
                                let iz = oz * s + kz - p;
                                for oy in y0..y1 {
                                    let iy = oy * s + ky - p;
                                    let orow = &mut o[(oz * oh + oy) * ow..][..ow];
                                    let irow = &xin[(iz * ih + iy) * iw..][..iw];
                                    for ox in x0..x1 {
                                        orow[ox] += wv * irow[ox * s + kx - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_backward(x: &[f64], w: &[f64], g: &[f64], geom: &ConvGeometry) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let &ConvGeometry {
        batch,
        in_channels,
        out_channels,
        kernel: k,
        stride: s,
        padding: p,
        in_dims: [id, ih, iw],
        out_dims: [od, oh, ow],
    } = geom;
    let (in_vol, out_vol) = (geom.in_volume(), geom.out_volume());
    let k3 = k * k * k;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out_channels];
    for bi in 0..batch {
        for co in 0..out_channels {
            let go = &g[(bi * out_channels + co) * out_vol..][..out_vol];
            db[co] += go.iter().sum::<f64>();
            for ci in 0..in_channels {
                let xin = &x[(bi * in_channels + ci) * in_vol..][..in_vol];
                let dxin = &mut dx[(bi * in_channels + ci) * in_vol..][..in_vol];
                let wbase = (co * in_channels + ci) * k3;
                for kz in 0..k {
                    let (z0, z1) = valid_range(kz, id, od, s, p);
                    for ky in 0..k {
                        let (y0, y1) = valid_range(ky, ih, oh, s, p);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(kx, iw, ow, s, p);
                            let widx = wbase + (kz * k + ky) * k + kx;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for oz in z0..z1 {
                                let iz = oz * s + kz - p;
                                for oy in y0..y1 {
                                    let iy = oy * s + ky - p;
                                    let grow = &go[(oz * oh + oy) * ow..][..ow];
                                    let ioff = (iz * ih + iy) * iw;
                                    for ox in x0..x1 {
                                        let ix = ioff + ox * s + kx - p;
                                        acc += grow[ox] * xin[ix];
                                        dxin[ix] += wv * grow[ox];
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
