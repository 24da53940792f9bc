//! Reverse-mode automatic differentiation over an append-only operation tape.
//!
//! The tape is define-by-run: a forward pass records every operation and its
//! inputs, `backward` replays the records in reverse and accumulates
//! gradients. A tape lives on one thread and is rebuilt per forward pass;
//! tensors themselves are value-semantic and move freely between threads.
//!
//! The operation set is exactly what the network needs: the
//! channel-full/time-1/3x3-spatial convolution, batch norm, PReLU/ReLU,
//! 2x2 pooling, channel concatenation, fully connected layers, MSE loss,
//! and a handful of elementwise/reshaping helpers for the residual heads.

use crate::error::{Error, Result};
use crate::tensor::{Dims5, Scalar, Tensor};

/// Per-channel normalization epsilon.
pub const BN_EPSILON: f64 = 1e-5;
/// Running-statistics momentum: `running = 0.9 * running + 0.1 * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a value recorded on a [`Tape`]. Valid only for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TracedValue {
    id: usize,
}

/// Batch-norm execution mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean/variance for batch norm.
///
/// Starts empty; training initializes it to (mean 0, var 1) and then tracks
/// an exponential moving average. Eval mode requires it to be initialized.
#[derive(Clone, Debug)]
pub struct RunningStats<E: Scalar> {
    mean: Option<Tensor<E>>,
    var: Option<Tensor<E>>,
}

impl<E: Scalar> RunningStats<E> {
    pub fn empty() -> Self {
        RunningStats {
            mean: None,
            var: None,
        }
    }

    /// Explicit initialization: mean 0, variance 1 per channel.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: Some(Tensor::zeros(&[channels])),
            var: Some(Tensor::ones(&[channels])),
        }
    }

    pub fn from_tensors(mean: Tensor<E>, var: Tensor<E>) -> Self {
        RunningStats {
            mean: Some(mean),
            var: Some(var),
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.mean.is_some()
    }

    pub fn mean(&self) -> Option<&Tensor<E>> {
        self.mean.as_ref()
    }

    pub fn var(&self) -> Option<&Tensor<E>> {
        self.var.as_ref()
    }
}

enum Op<E: Scalar> {
    Leaf,
    ConvCt33 {
        x: usize,
        w: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        /// Per-channel mean used for normalization (batch stats in train
        /// mode, running stats in eval mode).
        mean: Tensor<E>,
        /// Per-channel 1/sqrt(var + eps) matching `mean`.
        inv_std: Tensor<E>,
        train: bool,
    },
    Prelu {
        x: usize,
        alpha: usize,
    },
    Relu {
        x: usize,
    },
    AvgPool2 {
        x: usize,
    },
    MaxPool2 {
        x: usize,
        /// Window-local argmax per output element, row-major window order.
        argmax: Vec<u8>,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    FullyConnected {
        x: usize,
        w: usize,
        b: usize,
    },
    MseLoss {
        pred: usize,
        target: Tensor<E>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: E,
    },
    TimeSliceFlatten {
        x: usize,
        t: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
        widths: Vec<usize>,
    },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    op: Op<E>,
}

/// Append-only operation tape. One per forward/backward pass, one per thread.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> TracedValue {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        TracedValue { id }
    }

    /// Record an input or parameter as a tape leaf.
    pub fn leaf(&mut self, value: Tensor<E>) -> TracedValue {
        self.push(value, Op::Leaf)
    }

    /// Value of a recorded node.
    pub fn value(&self, v: TracedValue) -> &Tensor<E> {
        &self.nodes[v.id].value
    }

    /// Gradient of a node after `backward`; zeros when no gradient flowed.
    pub fn grad(&self, v: TracedValue) -> Tensor<E> {
        match &self.nodes[v.id].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.id].value.shape()),
        }
    }

    pub fn grad_opt(&self, v: TracedValue) -> Option<&Tensor<E>> {
        self.nodes[v.id].grad.as_ref()
    }

    // ── Convolution ─────────────────────────────────────────────────

    /// Convolution with kernel `[cout, cin, 1, 3, 3]`: all input channels
    /// mixed, kernel 1 on the time axis, 3x3 on height/width with zero
    /// padding 1 and stride 1. Output spatial extents equal the input's.
    pub fn conv_ct33(
        &mut self,
        x: TracedValue,
        weight: TracedValue,
        bias: TracedValue,
    ) -> Result<TracedValue> {
        let d = Dims5::from_shape("conv_ct33", self.value(x).shape())?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 5 || ws[2] != 1 || ws[3] != 3 || ws[4] != 3 {
            return Err(Error::shape(
                "conv_ct33",
                format!("weight must be [cout, cin, 1, 3, 3], got {ws:?}"),
            ));
        }
        if ws[1] != d.c {
            return Err(Error::shape(
                "conv_ct33",
                format!(
                    "input has {} channels but weight expects {} (input {:?}, weight {ws:?})",
                    d.c,
                    ws[1],
                    self.value(x).shape()
                ),
            ));
        }
        let cout = ws[0];
        let bs = self.value(bias).shape();
        if bs != [cout] {
            return Err(Error::shape(
                "conv_ct33",
                format!("bias must be [{cout}], got {bs:?}"),
            ));
        }

        let out_dims = Dims5 { c: cout, ..d };
        let mut out = Tensor::zeros(&out_dims.to_shape());
        {
            let xd = self.value(x).data();
            let wd = self.value(weight).data();
            let bd = self.value(bias).data();
            let od = out.data_mut();
            let plane = d.h * d.w;
            for n in 0..d.n {
                for co in 0..cout {
                    for t in 0..d.t {
                        let dst = &mut od[out_dims.plane(n, co, t)..][..plane];
                        dst.fill(bd[co]);
                        for ci in 0..d.c {
                            let src = &xd[d.plane(n, ci, t)..][..plane];
                            let taps = &wd[(co * d.c + ci) * 9..][..9];
                            for (k, &wv) in taps.iter().enumerate() {
                                shift_axpy(dst, src, wv, d.h, d.w, k / 3, k % 3);
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::ConvCt33 {
                x: x.id,
                w: weight.id,
                b: bias.id,
            },
        ))
    }

    // ── Batch normalization ─────────────────────────────────────────

    /// Per-channel batch normalization over the (n, t, h, w) axes with
    /// affine gamma/beta. Train mode uses batch statistics and updates
    /// `running`; eval mode normalizes with `running`.
    pub fn batch_norm(
        &mut self,
        x: TracedValue,
        gamma: TracedValue,
        beta: TracedValue,
        running: &mut RunningStats<E>,
        mode: BnMode,
    ) -> Result<TracedValue> {
        let d = Dims5::from_shape("batch_norm", self.value(x).shape())?;
        let c = d.c;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "gamma/beta must be [{c}], got {:?} and {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let m = d.n * d.t * d.h * d.w;
        let eps = E::from_f64(BN_EPSILON);

        let (mean, inv_std) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::Config(format!(
                        "batch_norm train mode needs at least 2 values per channel, got {m}"
                    )));
                }
                let (batch_mean, batch_var) = per_channel_stats(self.value(x), d);
                if !running.is_initialized() {
                    *running = RunningStats::identity(c);
                }
                let mom = E::from_f64(BN_MOMENTUM);
                let one_minus = E::one() - mom;
                let rm = running.mean.as_mut().unwrap().data_mut();
                let rv = running.var.as_mut().unwrap().data_mut();
                for ch in 0..c {
                    rm[ch] = mom * rm[ch] + one_minus * batch_mean.data()[ch];
                    rv[ch] = mom * rv[ch] + one_minus * batch_var.data()[ch];
                }
                let inv_std: Vec<E> = batch_var
                    .data()
                    .iter()
                    .map(|&v| E::one() / (v + eps).sqrt())
                    .collect();
                (batch_mean, Tensor::from_vec(&[c], inv_std)?)
            }
            BnMode::Eval => {
                if !running.is_initialized() {
                    return Err(Error::BnUninitialized);
                }
                let mean = running.mean.as_ref().unwrap().clone();
                let inv_std: Vec<E> = running
                    .var
                    .as_ref()
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| E::one() / (v + eps).sqrt())
                    .collect();
                (mean, Tensor::from_vec(&[c], inv_std)?)
            }
        };

        let mut out = Tensor::zeros(self.value(x).shape());
        {
            let xd = self.value(x).data();
            let g = self.value(gamma).data();
            let bt = self.value(beta).data();
            let od = out.data_mut();
            let plane = d.h * d.w;
            for n in 0..d.n {
                for ch in 0..c {
                    let scale = g[ch] * inv_std.data()[ch];
                    let shift = bt[ch] - mean.data()[ch] * scale;
                    for t in 0..d.t {
                        let off = d.plane(n, ch, t);
                        for (o, &v) in od[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                            *o = v * scale + shift;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                inv_std,
                train: mode == BnMode::Train,
            },
        ))
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    /// PReLU with one slope per channel (axis 1).
    pub fn prelu(&mut self, x: TracedValue, alpha: TracedValue) -> Result<TracedValue> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(
                "prelu",
                format!("input needs a channel axis, got {xs:?}"),
            ));
        }
        let c = xs[1];
        if self.value(alpha).shape() != [c] {
            return Err(Error::shape(
                "prelu",
                format!(
                    "alpha must be [{c}], got {:?}",
                    self.value(alpha).shape()
                ),
            ));
        }
        let per_channel: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        {
            let a = self.value(alpha).data();
            let od = out.data_mut();
            for (i, v) in od.iter_mut().enumerate() {
                if *v < E::zero() {
                    let ch = (i / per_channel) % c;
                    *v = a[ch] * *v;
                }
            }
        }
        Ok(self.push(
            out,
            Op::Prelu {
                x: x.id,
                alpha: alpha.id,
            },
        ))
    }

    /// Elementwise max(x, 0); subgradient 0 at x = 0.
    pub fn relu(&mut self, x: TracedValue) -> TracedValue {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < E::zero() {
                *v = E::zero();
            }
        }
        self.push(out, Op::Relu { x: x.id })
    }

    // ── Pooling ─────────────────────────────────────────────────────

    /// 2x2 average pooling with stride 2 on the spatial axes.
    pub fn avg_pool2(&mut self, x: TracedValue) -> Result<TracedValue> {
        let d = Dims5::from_shape("avg_pool2", self.value(x).shape())?;
        check_even("avg_pool2", d)?;
        let od = Dims5 {
            h: d.h / 2,
            w: d.w / 2,
            ..d
        };
        let mut out = Tensor::zeros(&od.to_shape());
        {
            let xd = self.value(x).data();
            let o = out.data_mut();
            let quarter = E::from_f64(0.25);
            for_each_window(d, |plane_in, plane_out, i, j| {
                let base = plane_in + 2 * i * d.w + 2 * j;
                let s = xd[base] + xd[base + 1] + xd[base + d.w] + xd[base + d.w + 1];
                o[plane_out + i * od.w + j] = s * quarter;
            });
        }
        Ok(self.push(out, Op::AvgPool2 { x: x.id }))
    }

    /// 2x2 max pooling with stride 2; ties go to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: TracedValue) -> Result<TracedValue> {
        let d = Dims5::from_shape("max_pool2", self.value(x).shape())?;
        check_even("max_pool2", d)?;
        let od = Dims5 {
            h: d.h / 2,
            w: d.w / 2,
            ..d
        };
        let mut out = Tensor::zeros(&od.to_shape());
        let mut argmax = vec![0u8; od.numel()];
        {
            let xd = self.value(x).data();
            let o = out.data_mut();
            for_each_window(d, |plane_in, plane_out, i, j| {
                let base = plane_in + 2 * i * d.w + 2 * j;
                let window = [xd[base], xd[base + 1], xd[base + d.w], xd[base + d.w + 1]];
                let mut best = 0usize;
                for k in 1..4 {
                    if window[k] > window[best] {
                        best = k;
                    }
                }
                let out_idx = plane_out + i * od.w + j;
                o[out_idx] = window[best];
                argmax[out_idx] = best as u8;
            });
        }
        Ok(self.push(out, Op::MaxPool2 { x: x.id, argmax }))
    }

    // ── Structure ───────────────────────────────────────────────────

    /// Concatenate along the channel axis: a's channels first, then b's.
    pub fn concat_channels(&mut self, a: TracedValue, b: TracedValue) -> Result<TracedValue> {
        let da = Dims5::from_shape("concat_channels", self.value(a).shape())?;
        let db = Dims5::from_shape("concat_channels", self.value(b).shape())?;
        if (da.n, da.t, da.h, da.w) != (db.n, db.t, db.h, db.w) {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "non-channel extents differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let od = Dims5 {
            c: da.c + db.c,
            ..da
        };
        let mut out = Tensor::zeros(&od.to_shape());
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let o = out.data_mut();
            let plane = da.h * da.w;
            for n in 0..da.n {
                for t in 0..da.t {
                    for c in 0..da.c {
                        let src = da.plane(n, c, t);
                        let dst = od.plane(n, c, t);
                        o[dst..dst + plane].copy_from_slice(&ad[src..src + plane]);
                    }
                    for c in 0..db.c {
                        let src = db.plane(n, c, t);
                        let dst = od.plane(n, da.c + c, t);
                        o[dst..dst + plane].copy_from_slice(&bd[src..src + plane]);
                    }
                }
            }
        }
        Ok(self.push(out, Op::ConcatChannels { a: a.id, b: b.id }))
    }

    /// Affine map `x @ weight + bias` for `x: [n, d]`, `weight: [d, k]`.
    pub fn fully_connected(
        &mut self,
        x: TracedValue,
        weight: TracedValue,
        bias: TracedValue,
    ) -> Result<TracedValue> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(
                "fully_connected",
                format!("need x [n,d] and weight [d,k] with matching d, got {xs:?} and {ws:?}"),
            ));
        }
        let (n, dim, k) = (xs[0], xs[1], ws[1]);
        if self.value(bias).shape() != [k] {
            return Err(Error::shape(
                "fully_connected",
                format!("bias must be [{k}], got {:?}", self.value(bias).shape()),
            ));
        }
        let mut out = Tensor::zeros(&[n, k]);
        {
            let xd = self.value(x).data();
            let wd = self.value(weight).data();
            let bd = self.value(bias).data();
            let o = out.data_mut();
            for row in 0..n {
                let dst = &mut o[row * k..(row + 1) * k];
                dst.copy_from_slice(bd);
                for dd in 0..dim {
                    let xv = xd[row * dim + dd];
                    let wrow = &wd[dd * k..(dd + 1) * k];
                    for (ov, &wv) in dst.iter_mut().zip(wrow) {
                        *ov = *ov + xv * wv;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::FullyConnected {
                x: x.id,
                w: weight.id,
                b: bias.id,
            },
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse_loss(&mut self, pred: TracedValue, target: &Tensor<E>) -> Result<TracedValue> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::shape(
                "mse_loss",
                format!(
                    "prediction {:?} vs target {:?}",
                    self.value(pred).shape(),
                    target.shape()
                ),
            ));
        }
        let n = target.numel();
        let mut acc = E::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let e = p - t;
            acc = acc + e * e;
        }
        let loss = acc / E::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseLoss {
                pred: pred.id,
                target: target.clone(),
            },
        ))
    }

    // ── Elementwise / reshaping helpers ─────────────────────────────

    pub fn add(&mut self, a: TracedValue, b: TracedValue) -> Result<TracedValue> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add { a: a.id, b: b.id }))
    }

    pub fn sub(&mut self, a: TracedValue, b: TracedValue) -> Result<TracedValue> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data: Vec<E> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Sub { a: a.id, b: b.id }))
    }

    pub fn scale(&mut self, x: TracedValue, factor: E) -> TracedValue {
        let mut out = self.value(x).clone();
        out.scale_assign(factor);
        self.push(out, Op::Scale { x: x.id, factor })
    }

    /// Extract time slice `t` of `[n, c, t, h, w]` and flatten it to
    /// `[n, c*h*w]` in channel-major then spatial order.
    pub fn time_slice_flatten(&mut self, x: TracedValue, t: usize) -> Result<TracedValue> {
        let d = Dims5::from_shape("time_slice_flatten", self.value(x).shape())?;
        if t >= d.t {
            return Err(Error::shape(
                "time_slice_flatten",
                format!("time index {t} out of range for extent {}", d.t),
            ));
        }
        let plane = d.h * d.w;
        let state = d.c * plane;
        let mut out = Tensor::zeros(&[d.n, state]);
        {
            let xd = self.value(x).data();
            let o = out.data_mut();
            for n in 0..d.n {
                for c in 0..d.c {
                    let src = d.plane(n, c, t);
                    let dst = n * state + c * plane;
                    o[dst..dst + plane].copy_from_slice(&xd[src..src + plane]);
                }
            }
        }
        Ok(self.push(out, Op::TimeSliceFlatten { x: x.id, t }))
    }

    /// Concatenate `[n, k_i]` blocks along the feature axis.
    pub fn concat_cols(&mut self, parts: &[TracedValue]) -> Result<TracedValue> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts given".to_string()));
        }
        let n = self.value(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != n {
                return Err(Error::shape(
                    "concat_cols",
                    format!("every part must be [{n}, k], got {s:?}"),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        {
            let o = out.data_mut();
            let mut col = 0;
            for (&p, &k) in parts.iter().zip(&widths) {
                let pd = self.value(p).data();
                for row in 0..n {
                    o[row * total + col..row * total + col + k]
                        .copy_from_slice(&pd[row * k..(row + 1) * k]);
                }
                col += k;
            }
        }
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).collect(),
                widths,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Afterwards every node reachable
    /// from the loss holds its gradient; unreachable nodes read as zero.
    pub fn backward(&mut self, loss: TracedValue) -> Result<()> {
        let shape = self.nodes[loss.id].value.shape().to_vec();
        if self.nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss { shape });
        }
        self.nodes[loss.id].grad = Some(Tensor::ones(&shape));

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(gy) = node.grad.as_ref() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::ConvCt33 { x, w, b } => backward_conv(before, *x, *w, *b, gy),
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    train,
                } => backward_batch_norm(before, *x, *gamma, *beta, mean, inv_std, *train, gy),
                Op::Prelu { x, alpha } => backward_prelu(before, *x, *alpha, gy),
                Op::Relu { x } => {
                    let xd = before[*x].value.data();
                    let data: Vec<E> = gy
                        .data()
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > E::zero() { g } else { E::zero() })
                        .collect();
                    let dx = Tensor::from_vec(before[*x].value.shape(), data).unwrap();
                    accum(&mut before[*x], dx);
                }
                Op::AvgPool2 { x } => backward_avg_pool(before, *x, gy),
                Op::MaxPool2 { x, argmax } => backward_max_pool(before, *x, argmax, gy),
                Op::ConcatChannels { a, b } => backward_concat_channels(before, *a, *b, gy),
                Op::FullyConnected { x, w, b } => backward_fully_connected(before, *x, *w, *b, gy),
                Op::MseLoss { pred, target } => {
                    let g = gy.item();
                    let p = &before[*pred].value;
                    let scale = E::from_f64(2.0 / target.numel() as f64) * g;
                    let data: Vec<E> = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&pv, &tv)| (pv - tv) * scale)
                        .collect();
                    let dp = Tensor::from_vec(p.shape(), data).unwrap();
                    accum(&mut before[*pred], dp);
                }
                Op::Add { a, b } => {
                    let ga = gy.clone();
                    let gb = gy.clone();
                    accum(&mut before[*a], ga);
                    accum(&mut before[*b], gb);
                }
                Op::Sub { a, b } => {
                    let ga = gy.clone();
                    let mut gb = gy.clone();
                    gb.scale_assign(-E::one());
                    accum(&mut before[*a], ga);
                    accum(&mut before[*b], gb);
                }
                Op::Scale { x, factor } => {
                    let mut dx = gy.clone();
                    dx.scale_assign(*factor);
                    accum(&mut before[*x], dx);
                }
                Op::TimeSliceFlatten { x, t } => backward_time_slice(before, *x, *t, gy),
                Op::ConcatCols { parts, widths } => backward_concat_cols(before, parts, widths, gy),
            }
        }
        Ok(())
    }
}

// ── Shared kernels ──────────────────────────────────────────────────

/// `dst[i][j] += weight * src[i + di - 1][j + dj - 1]` over the valid
/// region of two h*w planes; out-of-range taps are the zero padding.
#[inline]
fn shift_axpy<E: Scalar>(dst: &mut [E], src: &[E], weight: E, h: usize, w: usize, di: usize, dj: usize) {
    let ioff = di as isize - 1;
    let joff = dj as isize - 1;
    let i0 = (-ioff).max(0) as usize;
    let i1 = ((h as isize - ioff).min(h as isize)) as usize;
    let j0 = (-joff).max(0) as usize;
    let j1 = ((w as isize - joff).min(w as isize)) as usize;
    if j0 >= j1 {
        return;
    }
    for i in i0..i1 {
        let src_row = (i as isize + ioff) as usize * w;
        let dst_row = i * w;
        let s0 = (j0 as isize + joff) as usize;
        let src_slice = &src[src_row + s0..src_row + s0 + (j1 - j0)];
        let dst_slice = &mut dst[dst_row + j0..dst_row + j1];
        for (d, &s) in dst_slice.iter_mut().zip(src_slice) {
            *d = *d + weight * s;
        }
    }
}

/// Dot product of `a[i][j] * b[i + di - 1][j + dj - 1]` over the valid region.
#[inline]
fn shift_dot<E: Scalar>(a: &[E], b: &[E], h: usize, w: usize, di: usize, dj: usize) -> E {
    let ioff = di as isize - 1;
    let joff = dj as isize - 1;
    let i0 = (-ioff).max(0) as usize;
    let i1 = ((h as isize - ioff).min(h as isize)) as usize;
    let j0 = (-joff).max(0) as usize;
    let j1 = ((w as isize - joff).min(w as isize)) as usize;
    let mut acc = E::zero();
    if j0 >= j1 {
        return acc;
    }
    for i in i0..i1 {
        let a_row = i * w;
        let b_row = (i as isize + ioff) as usize * w;
        let s0 = (j0 as isize + joff) as usize;
        let a_slice = &a[a_row + j0..a_row + j1];
        let b_slice = &b[b_row + s0..b_row + s0 + (j1 - j0)];
        for (&av, &bv) in a_slice.iter().zip(b_slice) {
            acc = acc + av * bv;
        }
    }
    acc
}

fn check_even(op: &'static str, d: Dims5) -> Result<()> {
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return Err(Error::shape(
            op,
            format!("height and width must be even, got {}x{}", d.h, d.w),
        ));
    }
    Ok(())
}

/// Iterate all 2x2 windows of a 5-axis tensor, handing the callback the
/// input plane offset, output plane offset, and output (i, j).
fn for_each_window(d: Dims5, mut f: impl FnMut(usize, usize, usize, usize)) {
    let od = Dims5 {
        h: d.h / 2,
        w: d.w / 2,
        ..d
    };
    for n in 0..d.n {
        for c in 0..d.c {
            for t in 0..d.t {
                let pin = d.plane(n, c, t);
                let pout = od.plane(n, c, t);
                for i in 0..od.h {
                    for j in 0..od.w {
                        f(pin, pout, i, j);
                    }
                }
            }
        }
    }
}

fn per_channel_stats<E: Scalar>(x: &Tensor<E>, d: Dims5) -> (Tensor<E>, Tensor<E>) {
    let m = (d.n * d.t * d.h * d.w) as f64;
    let inv_m = E::from_f64(1.0 / m);
    let plane = d.h * d.w;
    let mut mean = Tensor::zeros(&[d.c]);
    let mut var = Tensor::zeros(&[d.c]);
    let xd = x.data();
    for c in 0..d.c {
        let mut sum = E::zero();
        for n in 0..d.n {
            for t in 0..d.t {
                let off = d.plane(n, c, t);
                for &v in &xd[off..off + plane] {
                    sum = sum + v;
                }
            }
        }
        let mu = sum * inv_m;
        let mut sq = E::zero();
        for n in 0..d.n {
            for t in 0..d.t {
                let off = d.plane(n, c, t);
                for &v in &xd[off..off + plane] {
                    let e = v - mu;
                    sq = sq + e * e;
                }
            }
        }
        mean.data_mut()[c] = mu;
        var.data_mut()[c] = sq * inv_m;
    }
    (mean, var)
}

// ── Backward rules ──────────────────────────────────────────────────

fn accum<E: Scalar>(node: &mut Node<E>, delta: Tensor<E>) {
    match &mut node.grad {
        Some(g) => g.add_assign(&delta),
        None => node.grad = Some(delta),
    }
}

fn backward_conv<E: Scalar>(nodes: &mut [Node<E>], x: usize, w: usize, b: usize, gy: &Tensor<E>) {
    let d = Dims5::from_shape("conv_ct33", nodes[x].value.shape()).unwrap();
    let cout = nodes[w].value.shape()[0];
    let od = Dims5 { c: cout, ..d };
    let plane = d.h * d.w;

    let mut dx = Tensor::zeros(nodes[x].value.shape());
    let mut dw = Tensor::zeros(nodes[w].value.shape());
    let mut db = Tensor::zeros(&[cout]);
    {
        let gyd = gy.data();
        let wd = nodes[w].value.data();
        let xd = nodes[x].value.data();
        let dxd = dx.data_mut();
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        for n in 0..d.n {
            for co in 0..cout {
                for t in 0..d.t {
                    let gplane = &gyd[od.plane(n, co, t)..][..plane];
                    let mut bsum = E::zero();
                    for &g in gplane {
                        bsum = bsum + g;
                    }
                    dbd[co] = dbd[co] + bsum;
                    for ci in 0..d.c {
                        let taps = &wd[(co * d.c + ci) * 9..][..9];
                        let dtaps = &mut dwd[(co * d.c + ci) * 9..][..9];
                        let xplane = &xd[d.plane(n, ci, t)..][..plane];
                        let dxplane = &mut dxd[d.plane(n, ci, t)..][..plane];
                        for k in 0..9 {
                            // dL/dx gets the kernel applied with mirrored
                            // offsets; dL/dw is a shifted correlation.
                            shift_axpy(dxplane, gplane, taps[k], d.h, d.w, 2 - k / 3, 2 - k % 3);
                            dtaps[k] = dtaps[k] + shift_dot(gplane, xplane, d.h, d.w, k / 3, k % 3);
                        }
                    }
                }
            }
        }
    }
    accum(&mut nodes[x], dx);
    accum(&mut nodes[w], dw);
    accum(&mut nodes[b], db);
}

#[allow(clippy::too_many_arguments)]
fn backward_batch_norm<E: Scalar>(
    nodes: &mut [Node<E>],
    x: usize,
    gamma: usize,
    beta: usize,
    mean: &Tensor<E>,
    inv_std: &Tensor<E>,
    train: bool,
    gy: &Tensor<E>,
) {
    let d = Dims5::from_shape("batch_norm", nodes[x].value.shape()).unwrap();
    let plane = d.h * d.w;
    let m = E::from_f64((d.n * d.t * d.h * d.w) as f64);

    let mut dx = Tensor::zeros(nodes[x].value.shape());
    let mut dgamma = Tensor::zeros(&[d.c]);
    let mut dbeta = Tensor::zeros(&[d.c]);
    {
        let xd = nodes[x].value.data();
        let gd = nodes[gamma].value.data();
        let gyd = gy.data();
        let dxd = dx.data_mut();
        for c in 0..d.c {
            let mu = mean.data()[c];
            let istd = inv_std.data()[c];
            let g = gd[c];
            // First pass: sums of dy and dy*xhat.
            let mut sum_dy = E::zero();
            let mut sum_dy_xhat = E::zero();
            for n in 0..d.n {
                for t in 0..d.t {
                    let off = d.plane(n, c, t);
                    for (&gv, &xv) in gyd[off..off + plane].iter().zip(&xd[off..off + plane]) {
                        sum_dy = sum_dy + gv;
                        sum_dy_xhat = sum_dy_xhat + gv * (xv - mu) * istd;
                    }
                }
            }
            dgamma.data_mut()[c] = sum_dy_xhat;
            dbeta.data_mut()[c] = sum_dy;
            // Second pass: dx.
            for n in 0..d.n {
                for t in 0..d.t {
                    let off = d.plane(n, c, t);
                    for idx in off..off + plane {
                        let xhat = (xd[idx] - mu) * istd;
                        dxd[idx] = if train {
                            g * istd * (gyd[idx] - sum_dy / m - xhat * sum_dy_xhat / m)
                        } else {
                            g * istd * gyd[idx]
                        };
                    }
                }
            }
        }
    }
    accum(&mut nodes[x], dx);
    accum(&mut nodes[gamma], dgamma);
    accum(&mut nodes[beta], dbeta);
}

fn backward_prelu<E: Scalar>(nodes: &mut [Node<E>], x: usize, alpha: usize, gy: &Tensor<E>) {
    let xs = nodes[x].value.shape().to_vec();
    let c = xs[1];
    let per_channel: usize = xs[2..].iter().product();
    let mut dx = Tensor::zeros(&xs);
    let mut dalpha = Tensor::zeros(&[c]);
    {
        let xd = nodes[x].value.data();
        let ad = nodes[alpha].value.data();
        let gyd = gy.data();
        let dxd = dx.data_mut();
        let dad = dalpha.data_mut();
        for i in 0..xd.len() {
            let ch = (i / per_channel) % c;
            if xd[i] >= E::zero() {
                dxd[i] = gyd[i];
            } else {
                dxd[i] = gyd[i] * ad[ch];
                dad[ch] = dad[ch] + gyd[i] * xd[i];
            }
        }
    }
    accum(&mut nodes[x], dx);
    accum(&mut nodes[alpha], dalpha);
}

fn backward_avg_pool<E: Scalar>(nodes: &mut [Node<E>], x: usize, gy: &Tensor<E>) {
    let d = Dims5::from_shape("avg_pool2", nodes[x].value.shape()).unwrap();
    let od = Dims5 {
        h: d.h / 2,
        w: d.w / 2,
        ..d
    };
    let mut dx = Tensor::zeros(nodes[x].value.shape());
    {
        let gyd = gy.data();
        let dxd = dx.data_mut();
        let quarter = E::from_f64(0.25);
        for_each_window(d, |pin, pout, i, j| {
            let g = gyd[pout + i * od.w + j] * quarter;
            let base = pin + 2 * i * d.w + 2 * j;
            dxd[base] = dxd[base] + g;
            dxd[base + 1] = dxd[base + 1] + g;
            dxd[base + d.w] = dxd[base + d.w] + g;
            dxd[base + d.w + 1] = dxd[base + d.w + 1] + g;
        });
    }
    accum(&mut nodes[x], dx);
}

fn backward_max_pool<E: Scalar>(nodes: &mut [Node<E>], x: usize, argmax: &[u8], gy: &Tensor<E>) {
    let d = Dims5::from_shape("max_pool2", nodes[x].value.shape()).unwrap();
    let od = Dims5 {
        h: d.h / 2,
        w: d.w / 2,
        ..d
    };
    let mut dx = Tensor::zeros(nodes[x].value.shape());
    {
        let gyd = gy.data();
        let dxd = dx.data_mut();
        for_each_window(d, |pin, pout, i, j| {
            let out_idx = pout + i * od.w + j;
            let k = argmax[out_idx] as usize;
            let base = pin + 2 * i * d.w + 2 * j;
            let target = base + (k / 2) * d.w + (k % 2);
            dxd[target] = dxd[target] + gyd[out_idx];
        });
    }
    accum(&mut nodes[x], dx);
}

fn backward_concat_channels<E: Scalar>(nodes: &mut [Node<E>], a: usize, b: usize, gy: &Tensor<E>) {
    let da = Dims5::from_shape("concat_channels", nodes[a].value.shape()).unwrap();
    let db = Dims5::from_shape("concat_channels", nodes[b].value.shape()).unwrap();
    let od = Dims5 {
        c: da.c + db.c,
        ..da
    };
    let plane = da.h * da.w;
    let mut ga = Tensor::zeros(nodes[a].value.shape());
    let mut gb = Tensor::zeros(nodes[b].value.shape());
    {
        let gyd = gy.data();
        let gad = ga.data_mut();
        let gbd = gb.data_mut();
        for n in 0..da.n {
            for t in 0..da.t {
                for c in 0..da.c {
                    let src = od.plane(n, c, t);
                    let dst = da.plane(n, c, t);
                    gad[dst..dst + plane].copy_from_slice(&gyd[src..src + plane]);
                }
                for c in 0..db.c {
                    let src = od.plane(n, da.c + c, t);
                    let dst = db.plane(n, c, t);
                    gbd[dst..dst + plane].copy_from_slice(&gyd[src..src + plane]);
                }
            }
        }
    }
    accum(&mut nodes[a], ga);
    accum(&mut nodes[b], gb);
}

fn backward_fully_connected<E: Scalar>(
    nodes: &mut [Node<E>],
    x: usize,
    w: usize,
    b: usize,
    gy: &Tensor<E>,
) {
    let xs = nodes[x].value.shape().to_vec();
    let (n, dim) = (xs[0], xs[1]);
    let k = nodes[w].value.shape()[1];
    let mut dx = Tensor::zeros(&xs);
    let mut dw = Tensor::zeros(nodes[w].value.shape());
    let mut db = Tensor::zeros(&[k]);
    {
        let xd = nodes[x].value.data();
        let wd = nodes[w].value.data();
        let gyd = gy.data();
        let dxd = dx.data_mut();
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        for row in 0..n {
            let grow = &gyd[row * k..(row + 1) * k];
            for (dbv, &gv) in dbd.iter_mut().zip(grow) {
                *dbv = *dbv + gv;
            }
            for dd in 0..dim {
                let wrow = &wd[dd * k..(dd + 1) * k];
                let mut acc = E::zero();
                for (&wv, &gv) in wrow.iter().zip(grow) {
                    acc = acc + wv * gv;
                }
                dxd[row * dim + dd] = acc;
                let xv = xd[row * dim + dd];
                let dwrow = &mut dwd[dd * k..(dd + 1) * k];
                for (dwv, &gv) in dwrow.iter_mut().zip(grow) {
                    *dwv = *dwv + xv * gv;
                }
            }
        }
    }
    accum(&mut nodes[x], dx);
    accum(&mut nodes[w], dw);
    accum(&mut nodes[b], db);
}

fn backward_time_slice<E: Scalar>(nodes: &mut [Node<E>], x: usize, t: usize, gy: &Tensor<E>) {
    let d = Dims5::from_shape("time_slice_flatten", nodes[x].value.shape()).unwrap();
    let plane = d.h * d.w;
    let state = d.c * plane;
    let mut dx = Tensor::zeros(nodes[x].value.shape());
    {
        let gyd = gy.data();
        let dxd = dx.data_mut();
        for n in 0..d.n {
            for c in 0..d.c {
                let dst = d.plane(n, c, t);
                let src = n * state + c * plane;
                dxd[dst..dst + plane].copy_from_slice(&gyd[src..src + plane]);
            }
        }
    }
    accum(&mut nodes[x], dx);
}

fn backward_concat_cols<E: Scalar>(
    nodes: &mut [Node<E>],
    parts: &[usize],
    widths: &[usize],
    gy: &Tensor<E>,
) {
    let total: usize = widths.iter().sum();
    let n = gy.shape()[0];
    let gyd = gy.data();
    let mut col = 0;
    for (&p, &k) in parts.iter().zip(widths) {
        let mut gp = Tensor::zeros(&[n, k]);
        {
            let gpd = gp.data_mut();
            for row in 0..n {
                gpd[row * k..(row + 1) * k]
                    .copy_from_slice(&gyd[row * total + col..row * total + col + k]);
            }
        }
        accum(&mut nodes[p], gp);
        col += k;
    }
}
