//! Small 1D convolutional network with hand-written backpropagation.
//!
//! Fixed layer stack over a length-`L` single-channel input (one position
//! per feature):
//!
//! ```text
//! conv(c1, k, same) -> batchnorm -> relu -> maxpool(2) -> dropout
//! conv(c2, k, same) -> batchnorm -> relu -> maxpool(2) -> dropout
//! global average pool -> dense(d1) -> relu -> dropout
//! dense(d2) -> relu -> dropout -> dense(1) -> sigmoid
//! ```
//!
//! Dropout is inverted (kept units scaled by `1 / (1 - rate)`) and masks are
//! passed in explicitly so a training step is a deterministic function of
//! parameters, batch and masks. The loss is the batch mean of per-sample
//! weighted binary cross-entropy plus `l2 / 2` times the squared norm of the
//! two hidden dense kernels.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{sigmoid, softplus};
use crate::dataset::{compute_class_weights, ClassWeights};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::roc_auc;
use crate::par;
use crate::seed;

/// Rows per gradient-accumulation chunk; fixed so sums do not depend on
/// the thread count.
const GRAD_CHUNK: usize = 16;
const PREDICT_BATCH: usize = 1024;

pub const PARAM_NAMES: [&str; 14] = [
    "conv1.kernel",
    "conv1.bias",
    "bn1.gamma",
    "bn1.beta",
    "conv2.kernel",
    "conv2.bias",
    "bn2.gamma",
    "bn2.beta",
    "dense1.kernel",
    "dense1.bias",
    "dense2.kernel",
    "dense2.bias",
    "output.kernel",
    "output.bias",
];

const C1W: usize = 0;
const C1B: usize = 1;
const G1: usize = 2;
const B1: usize = 3;
const C2W: usize = 4;
const C2B: usize = 5;
const G2: usize = 6;
const B2: usize = 7;
const D1W: usize = 8;
const D1B: usize = 9;
const D2W: usize = 10;
const D2B: usize = 11;
const OW: usize = 12;
const OB: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub input_len: usize,
    pub filters: [usize; 2],
    pub kernel: usize,
    pub dense: [usize; 2],
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_len: 25,
            filters: [32, 64],
            kernel: 3,
            dense: [64, 32],
            dropout: 0.4,
            bn_eps: 1e-3,
            bn_momentum: 0.99,
        }
    }
}

impl NetworkSpec {
    /// Same stack with 8 and 16 filters, for fast gradient checks.
    pub fn reduced() -> Self {
        Self {
            filters: [8, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ShapeMismatch(m.into()));
        if self.input_len < 4 {
            return bad("input_len must be >= 4 to survive two poolings");
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        if self.filters.contains(&0) || self.dense.contains(&0) {
            return bad("layer widths must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn dims(&self) -> Dims {
        let l1 = self.input_len / 2;
        Dims {
            l0: self.input_len,
            c1: self.filters[0],
            l1,
            c2: self.filters[1],
            l2: l1 / 2,
            d1: self.dense[0],
            d2: self.dense[1],
            k: self.kernel,
        }
    }

    /// Shapes of the trainable tensors, in `PARAM_NAMES` order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let d = self.dims();
        vec![
            vec![d.c1, 1, d.k],
            vec![d.c1],
            vec![d.c1],
            vec![d.c1],
            vec![d.c2, d.c1, d.k],
            vec![d.c2],
            vec![d.c2],
            vec![d.c2],
            vec![d.d1, d.c2],
            vec![d.d1],
            vec![d.d2, d.d1],
            vec![d.d2],
            vec![1, d.d2],
            vec![1],
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    l0: usize,
    c1: usize,
    l1: usize,
    c2: usize,
    l2: usize,
    d1: usize,
    d2: usize,
    k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            data: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor>,
    /// bn1.moving_mean, bn1.moving_var, bn2.moving_mean, bn2.moving_var
    pub running: Vec<Tensor>,
}

impl Network {
    /// He-uniform kernels (limit `sqrt(6 / fan_in)`), zero biases,
    /// batchnorm scale 1 / shift 0, moving statistics 0 / 1.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params: Vec<Tensor> = PARAM_NAMES
            .iter()
            .zip(spec.shapes())
            .map(|(name, shape)| Tensor::zeros(name, shape))
            .collect();
        for (i, t) in params.iter_mut().enumerate() {
            match i {
                C1W | C2W | D1W | D2W | OW => {
                    let fan_in: usize = t.shape[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let mut rng = seed::derived_rng(seed, "cnn-init", i as u64);
                    for v in &mut t.data {
                        *v = rng.random_range(-limit..limit);
                    }
                }
                G1 | G2 => t.data.iter_mut().for_each(|v| *v = 1.0),
                _ => {}
            }
        }
        let d = spec.dims();
        let mut running = vec![
            Tensor::zeros("bn1.moving_mean", vec![d.c1]),
            Tensor::zeros("bn1.moving_var", vec![d.c1]),
            Tensor::zeros("bn2.moving_mean", vec![d.c2]),
            Tensor::zeros("bn2.moving_var", vec![d.c2]),
        ];
        running[1].data.iter_mut().for_each(|v| *v = 1.0);
        running[3].data.iter_mut().for_each(|v| *v = 1.0);
        Ok(Self {
            spec,
            params,
            running,
        })
    }

    pub fn build_default(seed: u64) -> Self {
        Self::build(NetworkSpec::default(), seed).expect("default spec is valid")
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub fn non_trainable_count(&self) -> usize {
        self.running.iter().map(|t| t.data.len()).sum()
    }

    /// Eval-mode probabilities.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.n_rows());
        let mut start = 0;
        while start < x.n_rows() {
            let end = (start + PREDICT_BATCH).min(x.n_rows());
            let idx: Vec<usize> = (start..end).collect();
            out.extend(forward(self, &x.select_rows(&idx), Mode::Eval, None)?.probs);
            start = end;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text)?;
        net.spec.validate()?;
        let shapes = net.spec.shapes();
        if net.params.len() != shapes.len() || net.running.len() != 4 {
            return Err(Error::ShapeMismatch("wrong tensor count".into()));
        }
        for (t, s) in net.params.iter().zip(&shapes) {
            if &t.shape != s || t.data.len() != s.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!("tensor {}", t.name)));
            }
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics, dropout masks applied.
    Train,
    /// Moving statistics, no dropout.
    Eval,
}

/// Per-row inverted-dropout masks for the four dropout layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub conv1: Vec<Vec<f64>>,
    pub conv2: Vec<Vec<f64>>,
    pub dense1: Vec<Vec<f64>>,
    pub dense2: Vec<Vec<f64>>,
}

impl Masks {
    pub fn ones(spec: &NetworkSpec, rows: usize) -> Self {
        let d = spec.dims();
        Self {
            conv1: vec![vec![1.0; d.c1 * d.l1]; rows],
            conv2: vec![vec![1.0; d.c2 * d.l2]; rows],
            dense1: vec![vec![1.0; d.d1]; rows],
            dense2: vec![vec![1.0; d.d2]; rows],
        }
    }

    pub fn sample(spec: &NetworkSpec, rows: usize, rng: &mut seed::Rng) -> Self {
        let mut m = Self::ones(spec, rows);
        let rate = spec.dropout;
        if rate > 0.0 {
            let keep = 1.0 / (1.0 - rate);
            for layer in [&mut m.conv1, &mut m.conv2, &mut m.dense1, &mut m.dense2] {
                for row in layer.iter_mut() {
                    for v in row.iter_mut() {
                        *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
                    }
                }
            }
        }
        m
    }

    fn rows(&self) -> usize {
        self.conv1.len()
    }
}

#[derive(Debug, Clone)]
struct BnState {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct RowCache {
    xh1: Vec<f64>,
    n1: Vec<f64>,
    arg1: Vec<u8>,
    d1: Vec<f64>,
    a2: Vec<f64>,
    xh2: Vec<f64>,
    n2: Vec<f64>,
    arg2: Vec<u8>,
    d2: Vec<f64>,
    g: Vec<f64>,
    h1: Vec<f64>,
    e1: Vec<f64>,
    h2: Vec<f64>,
    e2: Vec<f64>,
}

/// Output of a forward pass plus everything backward needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    mode: Mode,
    rows: Vec<RowCache>,
    bn: [BnState; 2],
    masks: Masks,
    inputs: Vec<Vec<f64>>,
}

impl ForwardPass {
    /// Batch (mean, variance) of both batchnorm layers.
    pub fn batch_stats(&self) -> [(&[f64], &[f64]); 2] {
        [
            (&self.bn[0].mean, &self.bn[0].var),
            (&self.bn[1].mean, &self.bn[1].var),
        ]
    }

    /// ReLU activity and max-pool winners; equal patterns mean two passes
    /// lie on the same smooth piece of the network function.
    pub fn activation_pattern(&self) -> Vec<u8> {
        let mut p = Vec::new();
        for r in &self.rows {
            p.extend(r.n1.iter().map(|&v| u8::from(v > 0.0)));
            p.extend(&r.arg1);
            p.extend(r.n2.iter().map(|&v| u8::from(v > 0.0)));
            p.extend(&r.arg2);
            p.extend(r.h1.iter().map(|&v| u8::from(v > 0.0)));
            p.extend(r.h2.iter().map(|&v| u8::from(v > 0.0)));
        }
        p
    }
}

/// Row `t` holds `input[c][t + j - k/2]` at column `c * k + j`, zero padded.
fn im2col(input: &[f64], ci: usize, len: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let kk = ci * k;
    let mut col = vec![0.0; len * kk];
    for t in 0..len {
        let row = &mut col[t * kk..(t + 1) * kk];
        for c in 0..ci {
            for j in 0..k {
                if let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) {
                    row[c * k + j] = input[c * len + src];
                }
            }
        }
    }
    col
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// `out[o][t] = b[o] + sum_{c,j} w[o][c][j] * input[c][t + j - k/2]`, zero padded.
fn conv_same(input: &[f64], ci: usize, len: usize, w: &[f64], b: &[f64], co: usize, k: usize) -> Vec<f64> {
    let kk = ci * k;
    let col = im2col(input, ci, len, k);
    let mut out = vec![0.0; co * len];
    for o in 0..co {
        let wo = &w[o * kk..(o + 1) * kk];
        for t in 0..len {
            out[o * len + t] = b[o] + dot(wo, &col[t * kk..(t + 1) * kk]);
        }
    }
    out
}

/// Accumulates kernel/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_same_backward(
    input: &[f64],
    ci: usize,
    len: usize,
    w: &[f64],
    co: usize,
    k: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_input: bool,
) -> Vec<f64> {
    let pad = k / 2;
    let kk = ci * k;
    let col = im2col(input, ci, len, k);
    let mut dcol = if want_input { vec![0.0; len * kk] } else { Vec::new() };
    for o in 0..co {
        let g = &dout[o * len..(o + 1) * len];
        db[o] += g.iter().sum::<f64>();
        let wo = &w[o * kk..(o + 1) * kk];
        let dwo = &mut dw[o * kk..(o + 1) * kk];
        for (t, &gt) in g.iter().enumerate() {
            axpy(dwo, gt, &col[t * kk..(t + 1) * kk]);
            if want_input {
                axpy(&mut dcol[t * kk..(t + 1) * kk], gt, wo);
            }
        }
    }
    if !want_input {
        return Vec::new();
    }
    let mut din = vec![0.0; ci * len];
    for t in 0..len {
        for c in 0..ci {
            for j in 0..k {
                if let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) {
                    din[c * len + src] += dcol[t * kk + c * k + j];
                }
            }
        }
    }
    din
}

/// Width-2 stride-2 max pool; trailing odd position dropped. Ties pick the
/// first element.
fn pool2(input: &[f64], c: usize, len: usize) -> (Vec<f64>, Vec<u8>) {
    let out_len = len / 2;
    let mut out = vec![0.0; c * out_len];
    let mut arg = vec![0u8; c * out_len];
    for ch in 0..c {
        for u in 0..out_len {
            let a = input[ch * len + 2 * u];
            let b = input[ch * len + 2 * u + 1];
            let i = ch * out_len + u;
            if b > a {
                out[i] = b;
                arg[i] = 1;
            } else {
                out[i] = a;
            }
        }
    }
    (out, arg)
}

fn pool2_backward(dout: &[f64], arg: &[u8], c: usize, len: usize) -> Vec<f64> {
    let out_len = len / 2;
    let mut din = vec![0.0; c * len];
    for ch in 0..c {
        for u in 0..out_len {
            let i = ch * out_len + u;
            din[ch * len + 2 * u + usize::from(arg[i])] = dout[i];
        }
    }
    din
}

fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Per-channel mean and biased variance over rows x positions, reduced in
/// row order.
fn batch_norm_stats(per_row: &[&[f64]], c: usize, len: usize, eps: f64) -> BnState {
    let n = (per_row.len() * len) as f64;
    let sums = par::map_slice(per_row, |a| {
        (0..c).map(|ch| a[ch * len..(ch + 1) * len].iter().sum::<f64>()).collect::<Vec<f64>>()
    });
    let mut mean = vec![0.0; c];
    for s in &sums {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let sq = par::map_slice(per_row, |a| {
        (0..c)
            .map(|ch| a[ch * len..(ch + 1) * len].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    let mut var = vec![0.0; c];
    for s in &sq {
        for (m, v) in var.iter_mut().zip(s) {
            *m += v;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    BnState { mean, var, inv_std }
}

fn moving_state(mean: &[f64], var: &[f64], eps: f64) -> BnState {
    BnState {
        mean: mean.to_vec(),
        var: var.to_vec(),
        inv_std: var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
    }
}

fn normalize(a: &[f64], bn: &BnState, gamma: &[f64], beta: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xh = vec![0.0; a.len()];
    let mut n = vec![0.0; a.len()];
    for (i, &v) in a.iter().enumerate() {
        let ch = i / len;
        xh[i] = (v - bn.mean[ch]) * bn.inv_std[ch];
        n[i] = gamma[ch] * xh[i] + beta[ch];
    }
    (xh, n)
}

pub fn forward(net: &Network, x: &Matrix, mode: Mode, masks: Option<&Masks>) -> Result<ForwardPass> {
    let spec = &net.spec;
    let d = spec.dims();
    if x.n_cols() != d.l0 {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} inputs, got {}",
            d.l0,
            x.n_cols()
        )));
    }
    let b = x.n_rows();
    if b == 0 {
        return Err(Error::EmptySample);
    }
    let masks = match (mode, masks) {
        (Mode::Train, Some(m)) => {
            if m.rows() != b {
                return Err(Error::ShapeMismatch(format!("masks for {} rows, batch has {b}", m.rows())));
            }
            m.clone()
        }
        _ => Masks::ones(spec, b),
    };
    if mode == Mode::Train && b < 2 {
        return Err(Error::ShapeMismatch("batch statistics need at least 2 rows".into()));
    }
    let p = &net.params;
    let inputs: Vec<Vec<f64>> = x.rows().map(|r| r.to_vec()).collect();

    let a1: Vec<Vec<f64>> = par::map_slice(&inputs, |r| {
        conv_same(r, 1, d.l0, &p[C1W].data, &p[C1B].data, d.c1, d.k)
    });
    let bn1 = match mode {
        Mode::Train => {
            let refs: Vec<&[f64]> = a1.iter().map(|v| v.as_slice()).collect();
            batch_norm_stats(&refs, d.c1, d.l0, spec.bn_eps)
        }
        Mode::Eval => moving_state(&net.running[0].data, &net.running[1].data, spec.bn_eps),
    };
    let stage2: Vec<RowCache> = par::map_range(b, |i| {
        let (xh1, n1) = normalize(&a1[i], &bn1, &p[G1].data, &p[B1].data, d.l0);
        let r1: Vec<f64> = n1.iter().map(|&v| relu(v)).collect();
        let (p1, arg1) = pool2(&r1, d.c1, d.l0);
        let d1: Vec<f64> = p1.iter().zip(&masks.conv1[i]).map(|(v, m)| v * m).collect();
        let a2 = conv_same(&d1, d.c1, d.l1, &p[C2W].data, &p[C2B].data, d.c2, d.k);
        RowCache {
            xh1,
            n1,
            arg1,
            d1,
            a2,
            ..RowCache::default()
        }
    });
    let bn2 = match mode {
        Mode::Train => {
            let refs: Vec<&[f64]> = stage2.iter().map(|r| r.a2.as_slice()).collect();
            batch_norm_stats(&refs, d.c2, d.l1, spec.bn_eps)
        }
        Mode::Eval => moving_state(&net.running[2].data, &net.running[3].data, spec.bn_eps),
    };
    let tails: Vec<(RowCache, f64)> = par::map_range(b, |i| {
        let mut r = RowCache::default();
        let (xh2, n2) = normalize(&stage2[i].a2, &bn2, &p[G2].data, &p[B2].data, d.l1);
        let r2: Vec<f64> = n2.iter().map(|&v| relu(v)).collect();
        let (p2, arg2) = pool2(&r2, d.c2, d.l1);
        let d2: Vec<f64> = p2.iter().zip(&masks.conv2[i]).map(|(v, m)| v * m).collect();
        let g: Vec<f64> = (0..d.c2)
            .map(|ch| d2[ch * d.l2..(ch + 1) * d.l2].iter().sum::<f64>() / d.l2 as f64)
            .collect();
        let h1 = dense(&p[D1W].data, &p[D1B].data, &g);
        let e1: Vec<f64> = h1.iter().zip(&masks.dense1[i]).map(|(&v, m)| relu(v) * m).collect();
        let h2 = dense(&p[D2W].data, &p[D2B].data, &e1);
        let e2: Vec<f64> = h2.iter().zip(&masks.dense2[i]).map(|(&v, m)| relu(v) * m).collect();
        let z = dense(&p[OW].data, &p[OB].data, &e2)[0];
        r.xh2 = xh2;
        r.n2 = n2;
        r.arg2 = arg2;
        r.d2 = d2;
        r.g = g;
        r.h1 = h1;
        r.e1 = e1;
        r.h2 = h2;
        r.e2 = e2;
        (r, z)
    });
    let mut rows = stage2;
    let mut logits = Vec::with_capacity(b);
    for (r, (t, z)) in rows.iter_mut().zip(tails) {
        r.xh2 = t.xh2;
        r.n2 = t.n2;
        r.arg2 = t.arg2;
        r.d2 = t.d2;
        r.g = t.g;
        r.h1 = t.h1;
        r.e1 = t.e1;
        r.h2 = t.h2;
        r.e2 = t.e2;
        logits.push(z);
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    let probs = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(ForwardPass {
        logits,
        probs,
        mode,
        rows,
        bn: [bn1, bn2],
        masks,
        inputs,
    })
}

fn l2_penalty(net: &Network, l2: f64) -> f64 {
    let sq: f64 = [D1W, D2W]
        .iter()
        .flat_map(|&i| net.params[i].data.iter())
        .map(|w| w * w)
        .sum();
    0.5 * l2 * sq
}

/// Batch mean of weighted cross-entropy from logits, plus the l2 penalty.
pub fn batch_loss(net: &Network, logits: &[f64], y: &[u8], sample_weights: &[f64], l2: f64) -> f64 {
    let data: f64 = logits
        .iter()
        .zip(y)
        .zip(sample_weights)
        .map(|((&z, &label), &w)| w * (softplus(z) - f64::from(label) * z))
        .sum();
    data / logits.len() as f64 + l2_penalty(net, l2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// One entry per trainable tensor, in `PARAM_NAMES` order.
    pub tensors: Vec<Vec<f64>>,
}

fn add_into(acc: &mut [Vec<f64>], part: &[Vec<f64>]) {
    for (a, p) in acc.iter_mut().zip(part) {
        for (x, y) in a.iter_mut().zip(p) {
            *x += y;
        }
    }
}

fn zero_like(net: &Network, which: &[usize]) -> Vec<Vec<f64>> {
    which.iter().map(|&i| vec![0.0; net.params[i].data.len()]).collect()
}

/// Batchnorm input gradient given per-channel sums of `dn` and `dn * xh`.
#[allow(clippy::too_many_arguments)]
fn bn_backward_row(
    dn: &[f64],
    xh: &[f64],
    gamma: &[f64],
    bn: &BnState,
    sum_dn: &[f64],
    sum_dn_xh: &[f64],
    n: f64,
    len: usize,
    mode: Mode,
) -> Vec<f64> {
    dn.iter()
        .enumerate()
        .map(|(i, &g)| {
            let ch = i / len;
            let scale = gamma[ch] * bn.inv_std[ch];
            match mode {
                Mode::Train => scale / n * (n * g - sum_dn[ch] - xh[i] * sum_dn_xh[ch]),
                Mode::Eval => scale * g,
            }
        })
        .collect()
}

/// Gradients of [`batch_loss`] with respect to every trainable tensor.
pub fn backward(
    net: &Network,
    pass: &ForwardPass,
    y: &[u8],
    sample_weights: &[f64],
    l2: f64,
) -> Result<Gradients> {
    let b = pass.logits.len();
    if y.len() != b || sample_weights.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "batch of {b} rows, {} labels, {} weights",
            y.len(),
            sample_weights.len()
        )));
    }
    let d = net.spec.dims();
    let p = &net.params;
    let loss = batch_loss(net, &pass.logits, y, sample_weights, l2);
    let chunks = b.div_ceil(GRAD_CHUNK);
    let chunk_rows = |c: usize| c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(b);

    // dense head and second pooling, down to d(loss)/d(bn2 output)
    let head_ids = [D1W, D1B, D2W, D2B, OW, OB];
    let head = par::map_range(chunks, |c| {
        let mut grads = zero_like(net, &head_ids);
        let mut dn2_rows = Vec::new();
        for i in chunk_rows(c) {
            let r = &pass.rows[i];
            let dz = sample_weights[i] * (pass.probs[i] - f64::from(y[i])) / b as f64;
            for (o, &e) in r.e2.iter().enumerate() {
                grads[4][o] += dz * e;
            }
            grads[5][0] += dz;
            let dh2: Vec<f64> = (0..d.d2)
                .map(|o| {
                    let live = if r.h2[o] > 0.0 { pass.masks.dense2[i][o] } else { 0.0 };
                    dz * p[OW].data[o] * live
                })
                .collect();
            let mut de1 = vec![0.0; d.d1];
            for (o, &g) in dh2.iter().enumerate() {
                let w = &p[D2W].data[o * d.d1..(o + 1) * d.d1];
                for j in 0..d.d1 {
                    grads[2][o * d.d1 + j] += g * r.e1[j];
                    de1[j] += w[j] * g;
                }
                grads[3][o] += g;
            }
            let dh1: Vec<f64> = (0..d.d1)
                .map(|o| {
                    let live = if r.h1[o] > 0.0 { pass.masks.dense1[i][o] } else { 0.0 };
                    de1[o] * live
                })
                .collect();
            let mut dg = vec![0.0; d.c2];
            for (o, &g) in dh1.iter().enumerate() {
                let w = &p[D1W].data[o * d.c2..(o + 1) * d.c2];
                for j in 0..d.c2 {
                    grads[0][o * d.c2 + j] += g * r.g[j];
                    dg[j] += w[j] * g;
                }
                grads[1][o] += g;
            }
            let dp2: Vec<f64> = (0..d.c2 * d.l2)
                .map(|k| dg[k / d.l2] / d.l2 as f64 * pass.masks.conv2[i][k])
                .collect();
            let dr2 = pool2_backward(&dp2, &r.arg2, d.c2, d.l1);
            let dn2: Vec<f64> = dr2.iter().zip(&r.n2).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
            dn2_rows.push(dn2);
        }
        (grads, dn2_rows)
    });
    let mut head_grads = zero_like(net, &head_ids);
    let mut dn2 = Vec::with_capacity(b);
    for (g, rows) in head {
        add_into(&mut head_grads, &g);
        dn2.extend(rows);
    }

    let (sum_dn2, sum_dn2_xh2) = reduce_channels(&dn2, |i| &pass.rows[i].xh2, d.c2, d.l1);

    // second conv block, down to d(loss)/d(bn1 output)
    let mid_ids = [G2, B2, C2W, C2B];
    let n2 = (b * d.l1) as f64;
    let mid = par::map_range(chunks, |c| {
        let mut grads = zero_like(net, &mid_ids);
        let mut dn1_rows = Vec::new();
        for i in chunk_rows(c) {
            let r = &pass.rows[i];
            for (k, &g) in dn2[i].iter().enumerate() {
                grads[0][k / d.l1] += g * r.xh2[k];
                grads[1][k / d.l1] += g;
            }
            let da2 = bn_backward_row(&dn2[i], &r.xh2, &p[G2].data, &pass.bn[1], &sum_dn2, &sum_dn2_xh2, n2, d.l1, pass.mode);
            let (gw, rest) = grads.split_at_mut(3);
            let dd1 = conv_same_backward(&r.d1, d.c1, d.l1, &p[C2W].data, d.c2, d.k, &da2, &mut gw[2], &mut rest[0], true);
            let dp1: Vec<f64> = dd1.iter().zip(&pass.masks.conv1[i]).map(|(g, m)| g * m).collect();
            let dr1 = pool2_backward(&dp1, &r.arg1, d.c1, d.l0);
            let dn1: Vec<f64> = dr1.iter().zip(&r.n1).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
            dn1_rows.push(dn1);
        }
        (grads, dn1_rows)
    });
    let mut mid_grads = zero_like(net, &mid_ids);
    let mut dn1 = Vec::with_capacity(b);
    for (g, rows) in mid {
        add_into(&mut mid_grads, &g);
        dn1.extend(rows);
    }

    let (sum_dn1, sum_dn1_xh1) = reduce_channels(&dn1, |i| &pass.rows[i].xh1, d.c1, d.l0);

    // first conv block
    let low_ids = [G1, B1, C1W, C1B];
    let n1 = (b * d.l0) as f64;
    let low = par::map_range(chunks, |c| {
        let mut grads = zero_like(net, &low_ids);
        for i in chunk_rows(c) {
            let r = &pass.rows[i];
            for (k, &g) in dn1[i].iter().enumerate() {
                grads[0][k / d.l0] += g * r.xh1[k];
                grads[1][k / d.l0] += g;
            }
            let da1 = bn_backward_row(&dn1[i], &r.xh1, &p[G1].data, &pass.bn[0], &sum_dn1, &sum_dn1_xh1, n1, d.l0, pass.mode);
            let (gw, rest) = grads.split_at_mut(3);
            conv_same_backward(&pass.inputs[i], 1, d.l0, &p[C1W].data, d.c1, d.k, &da1, &mut gw[2], &mut rest[0], false);
        }
        grads
    });
    let mut low_grads = zero_like(net, &low_ids);
    for g in low {
        add_into(&mut low_grads, &g);
    }

    let mut tensors = vec![Vec::new(); PARAM_NAMES.len()];
    for (ids, grads) in [(&low_ids[..], low_grads), (&mid_ids[..], mid_grads), (&head_ids[..], head_grads)] {
        for (&i, g) in ids.iter().zip(grads) {
            tensors[i] = g;
        }
    }
    for i in [D1W, D2W] {
        for (g, w) in tensors[i].iter_mut().zip(&p[i].data) {
            *g += l2 * w;
        }
    }
    Ok(Gradients { loss, tensors })
}

/// Per-channel sums of `dn` and `dn * xh` over rows, in row order.
fn reduce_channels<'a>(
    dn: &[Vec<f64>],
    xh: impl Fn(usize) -> &'a Vec<f64>,
    c: usize,
    len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut s = vec![0.0; c];
    let mut sx = vec![0.0; c];
    for (i, row) in dn.iter().enumerate() {
        let xr = xh(i);
        for (k, &g) in row.iter().enumerate() {
            s[k / len] += g;
            sx[k / len] += g * xr[k];
        }
    }
    (s, sx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2: f64,
    /// Master switch for dropout during training.
    pub dropout: bool,
    /// `None` derives negatives/positives from the training labels.
    pub class_weights: Option<ClassWeights>,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            l2: 1e-3,
            dropout: true,
            class_weights: None,
            early_stop_patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be >= 2".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.step_size > 0.0 && self.epsilon > 0.0 && self.l2 >= 0.0) {
            return Err(Error::InvalidArgument("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Parameters from the best validation-AUC epoch.
    pub network: Network,
    pub best_epoch: usize,
    pub initial_val_auc: f64,
    pub history: Vec<EpochRecord>,
}

pub fn write_history_csv<W: Write>(writer: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "val_loss", "val_auc"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_auc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.params.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &[Vec<f64>], c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (k, t) in net.params.iter_mut().enumerate() {
            for (j, w) in t.data.iter_mut().enumerate() {
                let g = grads[k][j];
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *w -= c.step_size * (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
            }
        }
    }
}

fn eval_loss(net: &Network, x: &Matrix, y: &[u8], weights: ClassWeights) -> Result<(f64, f64)> {
    let probs = net.predict_proba(x)?;
    let mut loss = 0.0;
    for (&p, &label) in probs.iter().zip(y) {
        let p = p.clamp(1e-15, 1.0 - 1e-15);
        let l = if label == 1 { -p.ln() } else { -(1.0 - p).ln() };
        loss += weights.weight(label) * l;
    }
    Ok((loss / y.len() as f64, roc_auc(&probs, y)?))
}

/// Mini-batch Adam with per-epoch validation AUC, best-epoch restore and
/// early stopping after `early_stop_patience` epochs without improvement.
pub fn train(
    mut net: Network,
    train_data: (&Matrix, &[u8]),
    val_data: (&Matrix, &[u8]),
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (x, y) = train_data;
    let (vx, vy) = val_data;
    if x.n_rows() != y.len() || vx.n_rows() != vy.len() {
        return Err(Error::ShapeMismatch("features and labels differ in length".into()));
    }
    let all: Vec<usize> = (0..y.len()).collect();
    let weights = match config.class_weights {
        Some(w) => w,
        None => compute_class_weights(y, &all)?,
    };
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::SingleClass);
    }
    let sample_weights = weights.sample_weights(y);
    let momentum = net.spec.bn_momentum;
    let (_, initial_val_auc) = eval_loss(&net, vx, vy, weights)?;
    let mut best = (net.clone(), 0usize, f64::NEG_INFINITY);
    let mut adam = Adam::new(&net);
    let mut history = Vec::new();
    let mut stale = 0;
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        let mut order = all.clone();
        order.shuffle(&mut seed::derived_rng(config.seed, "cnn-epoch", epoch as u64));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let bx = x.select_rows(batch);
            let by: Vec<u8> = batch.iter().map(|&i| y[i]).collect();
            let bw: Vec<f64> = batch.iter().map(|&i| sample_weights[i]).collect();
            let masks = if config.dropout {
                Masks::sample(&net.spec, batch.len(), &mut seed::derived_rng(config.seed, "cnn-mask", step))
            } else {
                Masks::ones(&net.spec, batch.len())
            };
            step += 1;
            let pass = forward(&net, &bx, Mode::Train, Some(&masks))?;
            let grads = backward(&net, &pass, &by, &bw, config.l2)?;
            if !grads.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += grads.loss * batch.len() as f64;
            seen += batch.len();
            adam.step(&mut net, &grads.tensors, config);
            for (layer, (mean, var)) in pass.batch_stats().into_iter().enumerate() {
                for (r, m) in net.running[2 * layer].data.iter_mut().zip(mean) {
                    *r = momentum * *r + (1.0 - momentum) * m;
                }
                for (r, v) in net.running[2 * layer + 1].data.iter_mut().zip(var) {
                    *r = momentum * *r + (1.0 - momentum) * v;
                }
            }
        }
        let (val_loss, val_auc) = eval_loss(&net, vx, vy, weights)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_loss,
            val_auc,
        });
        if val_auc > best.2 {
            best = (net.clone(), epoch, val_auc);
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= config.early_stop_patience {
            break;
        }
    }
    Ok(TrainOutcome {
        network: best.0,
        best_epoch: best.1,
        initial_val_auc,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Draws skipped because the perturbation crossed a ReLU or pooling boundary.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_tensor: usize,
    pub worst_index: usize,
}

/// Central-difference check of [`backward`] on `samples` random parameter
/// entries, in train mode with fixed masks. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    net: &Network,
    x: &Matrix,
    y: &[u8],
    sample_weights: &[f64],
    masks: &Masks,
    l2: f64,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let base = forward(net, x, Mode::Train, Some(masks))?;
    let pattern = base.activation_pattern();
    let grads = backward(net, &base, y, sample_weights, l2)?;
    let offsets: Vec<usize> = net
        .params
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.data.len();
            Some(start)
        })
        .collect();
    let total = net.trainable_count();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut seed::derived_rng(seed, "grad-check", 0));
    let locate = |flat: usize| {
        let t = offsets.iter().rposition(|&o| o <= flat).unwrap_or(0);
        (t, flat - offsets[t])
    };
    let eval = |t: usize, j: usize, delta: f64| -> Result<(f64, bool)> {
        let mut probe = net.clone();
        probe.params[t].data[j] += delta;
        let pass = forward(&probe, x, Mode::Train, Some(masks))?;
        Ok((
            batch_loss(&probe, &pass.logits, y, sample_weights, l2),
            pass.activation_pattern() == pattern,
        ))
    };
    let results = par::map_slice(&order[..total.min(samples * 3)], |&flat| -> Result<Option<(f64, usize, usize)>> {
        let (t, j) = locate(flat);
        let (plus, same_p) = eval(t, j, eps)?;
        let (minus, same_m) = eval(t, j, -eps)?;
        if !(same_p && same_m) {
            return Ok(None);
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.tensors[t][j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        Ok(Some((rel, t, j)))
    });
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst_tensor: 0,
        worst_index: 0,
    };
    for r in results {
        if report.checked == samples {
            break;
        }
        match r? {
            None => report.skipped += 1,
            Some((rel, t, j)) => {
                report.checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst_tensor = t;
                    report.worst_index = j;
                }
            }
        }
    }
    Ok(report)
}
