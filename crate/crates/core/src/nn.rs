//! Neural building blocks: strided convolution, transposed convolution,
//! batch normalization, linear layers, pooling, and Adam.
//!
//! Layers own their parameters as named tensors. During a forward pass they
//! bind parameters onto the tape through a [`Ctx`], which caches bindings by
//! name so a parameter used twice (e.g. a shared encoder) accumulates onto a
//! single leaf. After `backward`, `Ctx::take_grads` hands the trainer one
//! gradient buffer per bound parameter.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, XmError};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Population-variance epsilon. Kept tiny so that normalized batch
/// statistics match their targets to ~1e-10 at f64.
pub const BN_EPS: f64 = 1e-12;
/// Fraction of the old running statistic kept per observation.
pub const BN_MOMENTUM: f64 = 0.9;
pub const LEAKY_SLOPE: f64 = 0.2;

// ── Parameters and modules ──────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// Carried state (batch-norm running statistics); checkpointed but not
    /// touched by the optimizer.
    State,
}

/// Enumeration of a model's parameters in a stable order.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p, _| n += p.value.numel());
        n
    }
}

/// Blend observed batch statistics into running statistics, in order.
pub fn apply_bn_updates(model: &mut dyn Module, updates: &[(String, Vec<f64>)]) {
    let mut by_name: HashMap<&str, Vec<&Vec<f64>>> = HashMap::new();
    for (name, obs) in updates {
        by_name.entry(name.as_str()).or_default().push(obs);
    }
    model.visit_mut(&mut |p, kind| {
        if kind != ParamKind::State {
            return;
        }
        if let Some(list) = by_name.get(p.name.as_str()) {
            for obs in list {
                for (r, o) in p.value.data.iter_mut().zip(obs.iter()) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * o;
                }
            }
        }
    });
}

// ── Forward context ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub mode: Mode,
    freeze: bool,
    bound: HashMap<String, TensorId>,
    order: Vec<String>,
    overrides: HashMap<String, TensorId>,
    /// `(state param name, observed statistic)` from train-mode batch norm.
    pub bn_updates: Vec<(String, Vec<f64>)>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, mode: Mode) -> Self {
        Ctx {
            tape,
            mode,
            freeze: false,
            bound: HashMap::new(),
            order: Vec::new(),
            overrides: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn train(tape: &'a mut Tape) -> Self {
        Ctx::new(tape, Mode::Train)
    }

    pub fn eval(tape: &'a mut Tape) -> Self {
        Ctx::new(tape, Mode::Eval)
    }

    /// While set, parameters bind as constants and record no gradients.
    pub fn set_freeze(&mut self, freeze: bool) {
        self.freeze = freeze;
    }

    /// Route a parameter name to an existing tape node (used by gradient
    /// checks to substitute one parameter).
    pub fn override_param(&mut self, name: impl Into<String>, id: TensorId) {
        self.overrides.insert(name.into(), id);
    }

    pub fn bind(&mut self, p: &Param) -> TensorId {
        if let Some(&id) = self.overrides.get(&p.name) {
            return id;
        }
        if let Some(&id) = self.bound.get(&p.name) {
            return id;
        }
        let id = if self.freeze {
            self.tape.constant(&p.value)
        } else {
            self.tape.param(&p.value)
        };
        self.bound.insert(p.name.clone(), id);
        self.order.push(p.name.clone());
        id
    }

    /// Gradients of bound parameters, in binding order.
    pub fn take_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.order
            .iter()
            .filter_map(|name| {
                let id = self.bound[name];
                self.tape.grad(id).map(|g| (name.clone(), g.to_vec()))
            })
            .collect()
    }
}

// ── Convolution ─────────────────────────────────────────────────────

fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel && stride > 0,
        "incompatible conv geometry: input {input}, kernel {kernel}, stride {stride}, pad {pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Cross-correlation convolution. `x: [B,C,H,W]`, `kernel: [OC,C,KH,KW]`,
/// `bias: [OC]`.
pub fn conv2d(
    tape: &mut Tape,
    x: TensorId,
    kernel: TensorId,
    bias: TensorId,
    stride: usize,
    pad: usize,
) -> TensorId {
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(kernel).to_vec();
    assert!(
        xs.len() == 4 && ks.len() == 4 && xs[1] == ks[1],
        "conv2d: incompatible shapes x {:?}, kernel {:?}",
        xs,
        ks
    );
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ks[0], ks[2], ks[3]);
    assert_eq!(tape.shape(bias), &[oc], "conv2d: bias shape {:?} vs {} channels", tape.shape(bias), oc);
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);

    let xv = tape.data(x).to_vec();
    let kv = tape.data(kernel).to_vec();
    let bv = tape.data(bias).to_vec();

    let mut out = vec![0.0; b * oc * oh * ow];
    for bi in 0..b {
        for o in 0..oc {
            for y in 0..oh {
                let ih0 = (y * stride) as isize - pad as isize;
                let kh_lo = (-ih0).max(0) as usize;
                let kh_hi = ((h as isize - ih0).min(kh as isize)).max(0) as usize;
                for xo in 0..ow {
                    let iw0 = (xo * stride) as isize - pad as isize;
                    let kw_lo = (-iw0).max(0) as usize;
                    let kw_hi = ((w as isize - iw0).min(kw as isize)).max(0) as usize;
                    let mut acc = bv[o];
                    for ic in 0..c {
                        for ky in kh_lo..kh_hi {
                            let ih = (ih0 + ky as isize) as usize;
                            let xrow = &xv[((bi * c + ic) * h + ih) * w..][..w];
                            let krow = &kv[((o * c + ic) * kh + ky) * kw..][..kw];
                            for kx in kw_lo..kw_hi {
                                acc += xrow[(iw0 + kx as isize) as usize] * krow[kx];
                            }
                        }
                    }
                    out[((bi * oc + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }

    let (nx, nk, nb) = (tape.input_needs(x), tape.input_needs(kernel), tape.input_needs(bias));
    let needs = nx || nk || nb;
    let back = Box::new(move |g: &[f64]| {
        let mut dx = if nx { vec![0.0; b * c * h * w] } else { Vec::new() };
        let mut dk = if nk { vec![0.0; oc * c * kh * kw] } else { Vec::new() };
        let mut db = if nb { vec![0.0; oc] } else { Vec::new() };
        for bi in 0..b {
            for o in 0..oc {
                for y in 0..oh {
                    let ih0 = (y * stride) as isize - pad as isize;
                    let kh_lo = (-ih0).max(0) as usize;
                    let kh_hi = ((h as isize - ih0).min(kh as isize)).max(0) as usize;
                    for xo in 0..ow {
                        let gv = g[((bi * oc + o) * oh + y) * ow + xo];
                        if gv == 0.0 {
                            continue;
                        }
                        if nb {
                            db[o] += gv;
                        }
                        if !nx && !nk {
                            continue;
                        }
                        let iw0 = (xo * stride) as isize - pad as isize;
                        let kw_lo = (-iw0).max(0) as usize;
                        let kw_hi = ((w as isize - iw0).min(kw as isize)).max(0) as usize;
                        for ic in 0..c {
                            for ky in kh_lo..kh_hi {
                                let ih = (ih0 + ky as isize) as usize;
                                let xbase = ((bi * c + ic) * h + ih) * w;
                                let kbase = ((o * c + ic) * kh + ky) * kw;
                                for kx in kw_lo..kw_hi {
                                    let iw = (iw0 + kx as isize) as usize;
                                    if nk {
                                        dk[kbase + kx] += gv * xv[xbase + iw];
                                    }
                                    if nx {
                                        dx[xbase + iw] += gv * kv[kbase + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut grads = Vec::new();
        if nx {
            grads.push((x, dx));
        }
        if nk {
            grads.push((kernel, dk));
        }
        if nb {
            grads.push((bias, db));
        }
        grads
    });
    tape.push_op(vec![b, oc, oh, ow], out, needs, back)
}

/// Transposed convolution. `x: [B,C,H,W]`, `kernel: [C,OC,KH,KW]`,
/// `bias: [OC]`; output spatial size `(H-1)*stride - 2*pad + KH`.
pub fn conv_transpose2d(
    tape: &mut Tape,
    x: TensorId,
    kernel: TensorId,
    bias: TensorId,
    stride: usize,
    pad: usize,
) -> TensorId {
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(kernel).to_vec();
    assert!(
        xs.len() == 4 && ks.len() == 4 && xs[1] == ks[0],
        "conv_transpose2d: incompatible shapes x {:?}, kernel {:?}",
        xs,
        ks
    );
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ks[1], ks[2], ks[3]);
    assert!(
        (h - 1) * stride + kh > 2 * pad && (w - 1) * stride + kw > 2 * pad,
        "incompatible transposed-conv geometry: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
    );
    assert_eq!(tape.shape(bias), &[oc], "conv_transpose2d: bias shape {:?} vs {} channels", tape.shape(bias), oc);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;

    let xv = tape.data(x).to_vec();
    let kv = tape.data(kernel).to_vec();
    let bv = tape.data(bias).to_vec();

    let mut out = vec![0.0; b * oc * oh * ow];
    for bi in 0..b {
        for o in 0..oc {
            let base = (bi * oc + o) * oh * ow;
            for v in &mut out[base..base + oh * ow] {
                *v = bv[o];
            }
        }
    }
    for bi in 0..b {
        for ic in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = xv[((bi * c + ic) * h + iy) * w + ix];
                    if v == 0.0 {
                        continue;
                    }
                    let oy0 = (iy * stride) as isize - pad as isize;
                    let ox0 = (ix * stride) as isize - pad as isize;
                    for o in 0..oc {
                        for ky in 0..kh {
                            let oy = oy0 + ky as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let obase = ((bi * oc + o) * oh + oy as usize) * ow;
                            let kbase = ((ic * oc + o) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ox = ox0 + kx as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[obase + ox as usize] += v * kv[kbase + kx];
                            }
                        }
                    }
                }
            }
        }
    }

    let (nx, nk, nb) = (tape.input_needs(x), tape.input_needs(kernel), tape.input_needs(bias));
    let needs = nx || nk || nb;
    let back = Box::new(move |g: &[f64]| {
        let mut dx = if nx { vec![0.0; b * c * h * w] } else { Vec::new() };
        let mut dk = if nk { vec![0.0; c * oc * kh * kw] } else { Vec::new() };
        let mut db = if nb { vec![0.0; oc] } else { Vec::new() };
        if nb {
            for bi in 0..b {
                for o in 0..oc {
                    let base = (bi * oc + o) * oh * ow;
                    db[o] += g[base..base + oh * ow].iter().sum::<f64>();
                }
            }
        }
        if nx || nk {
            for bi in 0..b {
                for ic in 0..c {
                    for iy in 0..h {
                        for ix in 0..w {
                            let xidx = ((bi * c + ic) * h + iy) * w + ix;
                            let oy0 = (iy * stride) as isize - pad as isize;
                            let ox0 = (ix * stride) as isize - pad as isize;
                            let mut acc = 0.0;
                            for o in 0..oc {
                                for ky in 0..kh {
                                    let oy = oy0 + ky as isize;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    let obase = ((bi * oc + o) * oh + oy as usize) * ow;
                                    let kbase = ((ic * oc + o) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ox = ox0 + kx as isize;
                                        if ox < 0 || ox >= ow as isize {
                                            continue;
                                        }
                                        let gv = g[obase + ox as usize];
                                        if nk {
                                            dk[kbase + kx] += gv * xv[xidx];
                                        }
                                        acc += gv * kv[kbase + kx];
                                    }
                                }
                            }
                            if nx {
                                dx[xidx] = acc;
                            }
                        }
                    }
                }
            }
        }
        let mut grads = Vec::new();
        if nx {
            grads.push((x, dx));
        }
        if nk {
            grads.push((kernel, dk));
        }
        if nb {
            grads.push((bias, db));
        }
        grads
    });
    tape.push_op(vec![b, oc, oh, ow], out, needs, back)
}

// ── Batch normalization ─────────────────────────────────────────────

/// Train-mode batch norm over `[B,C,H,W]` with population statistics.
/// Returns the output node together with the observed per-channel mean and
/// variance so the caller can fold them into running statistics.
pub fn batch_norm_train(
    tape: &mut Tape,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    eps: f64,
) -> (TensorId, Vec<f64>, Vec<f64>) {
    let xs = tape.shape(x).to_vec();
    assert_eq!(xs.len(), 4, "batch_norm expects [B,C,H,W], got {:?}", xs);
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let n = b * h * w;
    assert!(n >= 1, "batch_norm: empty batch");
    let xv = tape.data(x).to_vec();
    let gv = tape.data(gamma).to_vec();
    let bv = tape.data(beta).to_vec();

    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            let base = ((bi * c + ch) * h) * w;
            s += xv[base..base + h * w].iter().sum::<f64>();
        }
        mean[ch] = s / n as f64;
        let mut v = 0.0;
        for bi in 0..b {
            let base = ((bi * c + ch) * h) * w;
            for &val in &xv[base..base + h * w] {
                let d = val - mean[ch];
                v += d * d;
            }
        }
        var[ch] = v / n as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut out = vec![0.0; xv.len()];
    let mut xhat = vec![0.0; xv.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = ((bi * c + ch) * h) * w;
            for i in 0..h * w {
                let xh = (xv[base + i] - mean[ch]) * inv_std[ch];
                xhat[base + i] = xh;
                out[base + i] = gv[ch] * xh + bv[ch];
            }
        }
    }

    let (nx, ng, nb2) = (tape.input_needs(x), tape.input_needs(gamma), tape.input_needs(beta));
    let needs = nx || ng || nb2;
    let mean_out = mean.clone();
    let var_out = var.clone();
    let back = Box::new(move |g: &[f64]| {
        let nf = n as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let base = ((bi * c + ch) * h) * w;
                for i in 0..h * w {
                    sum_g[ch] += g[base + i];
                    sum_gx[ch] += g[base + i] * xhat[base + i];
                }
            }
        }
        let mut grads = Vec::new();
        if nx {
            let mut dx = vec![0.0; b * c * h * w];
            for bi in 0..b {
                for ch in 0..c {
                    let base = ((bi * c + ch) * h) * w;
                    let k = gv[ch] * inv_std[ch] / nf;
                    for i in 0..h * w {
                        dx[base + i] =
                            k * (nf * g[base + i] - sum_g[ch] - xhat[base + i] * sum_gx[ch]);
                    }
                }
            }
            grads.push((x, dx));
        }
        if ng {
            grads.push((gamma, sum_gx.clone()));
        }
        if nb2 {
            grads.push((beta, sum_g.clone()));
        }
        grads
    });
    let id = tape.push_op(xs, out, needs, back);
    (id, mean_out, var_out)
}

/// Eval-mode batch norm using frozen running statistics.
pub fn batch_norm_eval(
    tape: &mut Tape,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> TensorId {
    let xs = tape.shape(x).to_vec();
    assert_eq!(xs.len(), 4, "batch_norm expects [B,C,H,W], got {:?}", xs);
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let xv = tape.data(x).to_vec();
    let gv = tape.data(gamma).to_vec();
    let bv = tape.data(beta).to_vec();
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let rm = running_mean.to_vec();

    let mut out = vec![0.0; xv.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = ((bi * c + ch) * h) * w;
            for i in 0..h * w {
                out[base + i] = gv[ch] * (xv[base + i] - rm[ch]) * inv_std[ch] + bv[ch];
            }
        }
    }
    let (nx, ng, nb2) = (tape.input_needs(x), tape.input_needs(gamma), tape.input_needs(beta));
    let needs = nx || ng || nb2;
    let back = Box::new(move |g: &[f64]| {
        let mut grads = Vec::new();
        if nx {
            let mut dx = vec![0.0; xv.len()];
            for bi in 0..b {
                for ch in 0..c {
                    let base = ((bi * c + ch) * h) * w;
                    for i in 0..h * w {
                        dx[base + i] = g[base + i] * gv[ch] * inv_std[ch];
                    }
                }
            }
            grads.push((x, dx));
        }
        if ng {
            let mut dg = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = ((bi * c + ch) * h) * w;
                    for i in 0..h * w {
                        dg[ch] += g[base + i] * (xv[base + i] - rm[ch]) * inv_std[ch];
                    }
                }
            }
            grads.push((gamma, dg));
        }
        if nb2 {
            let mut dbv = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = ((bi * c + ch) * h) * w;
                    dbv[ch] += g[base..base + h * w].iter().sum::<f64>();
                }
            }
            grads.push((beta, dbv));
        }
        grads
    });
    tape.push_op(xs, out, needs, back)
}

/// Spatial mean: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool(tape: &mut Tape, x: TensorId) -> TensorId {
    let xs = tape.shape(x).to_vec();
    assert_eq!(xs.len(), 4, "global_avg_pool expects [B,C,H,W], got {:?}", xs);
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = (h * w) as f64;
    let xv = tape.data(x);
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        for ch in 0..c {
            let base = ((bi * c + ch) * h) * w;
            out[bi * c + ch] = xv[base..base + h * w].iter().sum::<f64>() / hw;
        }
    }
    let nx = tape.input_needs(x);
    let back = Box::new(move |g: &[f64]| {
        let mut dx = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for ch in 0..c {
                let base = ((bi * c + ch) * h) * w;
                let gv = g[bi * c + ch] / hw;
                for v in &mut dx[base..base + h * w] {
                    *v = gv;
                }
            }
        }
        vec![(x, dx)]
    });
    tape.push_op(vec![b, c], out, nx, back)
}

// ── Layers ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    Leaky(f64),
    Tanh,
    Identity,
}

pub fn apply_act(tape: &mut Tape, x: TensorId, act: Act) -> TensorId {
    match act {
        Act::Leaky(slope) => tape.leaky_relu(x, slope),
        Act::Tanh => tape.tanh(x),
        Act::Identity => x,
    }
}

/// Kaiming-style fan-in scaled normal init.
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: Param::new(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: Param::new(format!("{name}.running_var"), Tensor::full(vec![channels], 1.0)),
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: TensorId) -> TensorId {
        let gamma = ctx.bind(&self.gamma);
        let beta = ctx.bind(&self.beta);
        match ctx.mode {
            Mode::Train => {
                let (out, mean, var) = batch_norm_train(ctx.tape, x, gamma, beta, self.eps);
                ctx.bn_updates.push((self.running_mean.name.clone(), mean));
                ctx.bn_updates.push((self.running_var.name.clone(), var));
                out
            }
            Mode::Eval => batch_norm_eval(
                ctx.tape,
                x,
                gamma,
                beta,
                &self.running_mean.value.data,
                &self.running_var.value.data,
                self.eps,
            ),
        }
    }
}

impl Module for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        f(&self.gamma, ParamKind::Learnable);
        f(&self.beta, ParamKind::Learnable);
        f(&self.running_mean, ParamKind::State);
        f(&self.running_var, ParamKind::State);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        f(&mut self.gamma, ParamKind::Learnable);
        f(&mut self.beta, ParamKind::Learnable);
        f(&mut self.running_mean, ParamKind::State);
        f(&mut self.running_var, ParamKind::State);
    }
}

/// Convolution (+ optional batch norm) + activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kernel: Param,
    pub bias: Param,
    pub bn: Option<BatchNorm>,
    pub act: Act,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        bn: bool,
        act: Act,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = kaiming_std(in_ch * ksize * ksize);
        ConvBlock {
            kernel: Param::new(
                format!("{name}.kernel"),
                Tensor::randn(vec![out_ch, in_ch, ksize, ksize], std, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![out_ch])),
            bn: bn.then(|| BatchNorm::new(&format!("{name}.bn"), out_ch)),
            act,
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: TensorId) -> TensorId {
        let k = ctx.bind(&self.kernel);
        let b = ctx.bind(&self.bias);
        let mut out = conv2d(ctx.tape, x, k, b, self.stride, self.pad);
        if let Some(bn) = &self.bn {
            out = bn.forward(ctx, out);
        }
        apply_act(ctx.tape, out, self.act)
    }
}

impl Module for ConvBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        f(&self.kernel, ParamKind::Learnable);
        f(&self.bias, ParamKind::Learnable);
        if let Some(bn) = &self.bn {
            bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        f(&mut self.kernel, ParamKind::Learnable);
        f(&mut self.bias, ParamKind::Learnable);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(f);
        }
    }
}

/// Transposed convolution (+ optional batch norm) + activation.
#[derive(Clone, Debug)]
pub struct ConvTransposeBlock {
    pub kernel: Param,
    pub bias: Param,
    pub bn: Option<BatchNorm>,
    pub act: Act,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTransposeBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        bn: bool,
        act: Act,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = kaiming_std(in_ch * ksize * ksize);
        ConvTransposeBlock {
            kernel: Param::new(
                format!("{name}.kernel"),
                Tensor::randn(vec![in_ch, out_ch, ksize, ksize], std, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![out_ch])),
            bn: bn.then(|| BatchNorm::new(&format!("{name}.bn"), out_ch)),
            act,
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: TensorId) -> TensorId {
        let k = ctx.bind(&self.kernel);
        let b = ctx.bind(&self.bias);
        let mut out = conv_transpose2d(ctx.tape, x, k, b, self.stride, self.pad);
        if let Some(bn) = &self.bn {
            out = bn.forward(ctx, out);
        }
        apply_act(ctx.tape, out, self.act)
    }
}

impl Module for ConvTransposeBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        f(&self.kernel, ParamKind::Learnable);
        f(&self.bias, ParamKind::Learnable);
        if let Some(bn) = &self.bn {
            bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        f(&mut self.kernel, ParamKind::Learnable);
        f(&mut self.bias, ParamKind::Learnable);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(f);
        }
    }
}

/// Affine map on row-major `[rows, in] -> [rows, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(vec![in_dim, out_dim], std, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: TensorId) -> TensorId {
        let w = ctx.bind(&self.weight);
        let b = ctx.bind(&self.bias);
        let y = ctx.tape.matmul(x, w);
        ctx.tape.add_rowvec(y, b)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        f(&self.weight, ParamKind::Learnable);
        f(&self.bias, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        f(&mut self.weight, ParamKind::Learnable);
        f(&mut self.bias, ParamKind::Learnable);
    }
}

// ── Adam ────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimization step
    /// before updating the step's parameters.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Standard Adam with bias correction. Rejects non-finite gradients.
    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(XmError::NonFinite { term: format!("gradient of {name}"), step: self.t });
        }
        assert_eq!(param.len(), grad.len(), "adam: size mismatch for {name}");
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let t = self.t.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Moment buffers in sorted-name order, for checkpointing.
    pub fn export_moments(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| (n.clone(), self.m[n].clone(), self.v[n].clone()))
            .collect()
    }

    pub fn import_moments(&mut self, moments: Vec<(String, Vec<f64>, Vec<f64>)>) {
        self.m.clear();
        self.v.clear();
        for (n, m, v) in moments {
            self.m.insert(n.clone(), m);
            self.v.insert(n, v);
        }
    }
}
