//! Wengert tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Inputs always
//! precede the node that consumes them, so a single reverse sweep over the
//! node list visits each node exactly once in topological order.

use super::tensor::{gemm, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Softplus,
    LogSoftmaxRows,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    LogSoftmax(Var),
    Sum(Var),
    SliceCols { x: Var, start: usize, end: usize },
    Reshape(Var),
    TakeLast { x: Var, index: usize },
    GumbelSoftmax { log_probs: Var, noise: Tensor, tau: Var },
    ComposeCode { gates: Var, features: Var },
    BernoulliLogLik { logits: Var, target: Tensor },
    KlCategorical { log_q: Var, log_p: Tensor },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise log-softmax of `x` into `out`, with max subtraction.
fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, &[])
    }

    /// Records a parameter leaf; its gradient lands in the store on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param(id), store.value(id).clone(), &[])
    }

    /// `y = x·W + b` for `x: [B×n]`, `W: [n×m]`, `b: [m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("affine", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("affine bias", ws, bs));
        }
        let (rows, n, m) = (xs[0], xs[1], ws[1]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(
            rows,
            n,
            m,
            1.0,
            MatRef::row_major(self.value(x).data(), n),
            MatRef::row_major(self.value(w).data(), m),
            1.0,
            &mut out,
        );
        let value = Tensor::from_parts(vec![rows, m], out);
        Ok(self.push(Op::Affine { x, w, b }, value, &[x, w, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a)
            .zip_map(self.value(b), f)
            .map_err(|_| Error::shape(name, self.value(a).shape(), self.value(b).shape()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), value, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x), value, &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Relu => self.relu(x),
            Activation::Softplus => self.softplus(x),
            Activation::LogSoftmaxRows => self.log_softmax(x),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), value, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        self.push(Op::Softplus(x), value, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), value, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("ln of non-positive value {bad}")));
        }
        let value = self.value(x).map(f64::ln);
        Ok(self.push(Op::Ln(x), value, &[x]))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value, &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, value, &[x])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let cols = input.cols();
        let mut out = vec![0.0; input.len()];
        for (row, dst) in input.data().chunks(cols).zip(out.chunks_mut(cols)) {
            log_softmax_row(row, dst);
        }
        let value = Tensor::from_parts(input.shape().to_vec(), out);
        self.push(Op::LogSoftmax(x), value, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, end)?;
        Ok(self.push(Op::SliceCols { x, start, end }, value, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value, &[x]))
    }

    /// Picks entry `index` of the last axis, dropping that axis.
    pub fn take_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let input = self.value(x);
        let c = input.cols();
        if input.ndim() < 2 || index >= c {
            return Err(Error::shape("take_last", input.shape(), &[index]));
        }
        let data = input.data().chunks(c).map(|row| row[index]).collect();
        let shape = input.shape()[..input.ndim() - 1].to_vec();
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(Op::TakeLast { x, index }, value, &[x]))
    }

    /// Relaxed categorical draws: for every row `b` and slot `l`,
    /// `softmax((log_probs[b] + noise[b, l]) / tau)`.
    ///
    /// `log_probs: [B×C]`, `noise: [B×L×C]`, `tau` a positive scalar node.
    pub fn gumbel_softmax(&mut self, log_probs: Var, noise: Tensor, tau: Var) -> Result<Var> {
        let lp = self.value(log_probs);
        let (ls, ns) = (lp.shape(), noise.shape());
        if ls.len() != 2 || ns.len() != 3 || ns[0] != ls[0] || ns[2] != ls[1] {
            return Err(Error::shape("gumbel_softmax", ls, ns));
        }
        let t = self.value(tau);
        if t.len() != 1 {
            return Err(Error::shape("gumbel_softmax temperature", t.shape(), &[]));
        }
        let tau_v = t.data()[0];
        if !(tau_v > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {tau_v}")));
        }
        let (b, l, c) = (ns[0], ns[1], ns[2]);
        let mut out = vec![0.0; b * l * c];
        let mut scaled = vec![0.0; c];
        for bi in 0..b {
            let lrow = lp.row(bi);
            for li in 0..l {
                let off = (bi * l + li) * c;
                let xi = &noise.data()[off..off + c];
                for k in 0..c {
                    scaled[k] = (lrow[k] + xi[k]) / tau_v;
                }
                let dst = &mut out[off..off + c];
                log_softmax_row(&scaled, dst);
                dst.iter_mut().for_each(|v| *v = v.exp());
            }
        }
        let value = Tensor::from_parts(ns.to_vec(), out);
        Ok(self.push(Op::GumbelSoftmax { log_probs, noise, tau }, value, &[log_probs, tau]))
    }

    /// `code[b] = Σ_l gates[b, l] · features[b, l]` for `gates: [B×L]`, `features: [B×L×K]`.
    pub fn compose_code(&mut self, gates: Var, features: Var) -> Result<Var> {
        let (g, f) = (self.value(gates), self.value(features));
        let (gs, fs) = (g.shape(), f.shape());
        if gs.len() != 2 || fs.len() != 3 || gs[0] != fs[0] || gs[1] != fs[1] {
            return Err(Error::shape("compose_code", gs, fs));
        }
        let (b, l, k) = (fs[0], fs[1], fs[2]);
        let mut out = vec![0.0; b * k];
        for bi in 0..b {
            let dst = &mut out[bi * k..(bi + 1) * k];
            for li in 0..l {
                let w = g.data()[bi * l + li];
                let src = &f.data()[(bi * l + li) * k..(bi * l + li + 1) * k];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let value = Tensor::from_parts(vec![b, k], out);
        Ok(self.push(Op::ComposeCode { gates, features }, value, &[gates, features]))
    }

    /// `Σ t·log σ(a) + (1−t)·log(1−σ(a))` summed over all entries, from logits.
    pub fn bernoulli_loglik(&mut self, logits: Var, target: Tensor) -> Result<Var> {
        let a = self.value(logits);
        if a.shape() != target.shape() {
            return Err(Error::shape("bernoulli_loglik", a.shape(), target.shape()));
        }
        let total: f64 = a
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &t)| t * a - softplus(a))
            .sum();
        Ok(self.push(Op::BernoulliLogLik { logits, target }, Tensor::scalar(total), &[logits]))
    }

    /// `Σ_rows Σ_c q_c (log q_c − log p_c)` with `q = exp(log_q)`.
    ///
    /// `log_q: [R×C]` must hold normalised log-probabilities (e.g. the output of
    /// [`Tape::log_softmax`]); `log_p: [C]`.
    pub fn kl_categorical(&mut self, log_q: Var, log_p: Tensor) -> Result<Var> {
        let lq = self.value(log_q);
        if lq.cols() != log_p.len() || log_p.ndim() != 1 {
            return Err(Error::shape("kl_categorical", lq.shape(), log_p.shape()));
        }
        let c = log_p.len();
        let mut total = 0.0;
        for row in lq.data().chunks(c) {
            for (q, p) in row.iter().zip(log_p.data()) {
                total += q.exp() * (q - p);
            }
        }
        Ok(self.push(Op::KlCategorical { log_q, log_p }, Tensor::scalar(total), &[log_q]))
    }

    fn reverse(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contribution: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        };
        let out = &node.value;
        match node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(x);
                let (rows, n) = (xv.shape()[0], xv.shape()[1]);
                let m = out.shape()[1];
                if self.wants(x) {
                    let mut gx = vec![0.0; rows * n];
                    gemm(
                        rows,
                        m,
                        n,
                        1.0,
                        MatRef::row_major(g, m),
                        MatRef::transposed(self.value(w).data(), m),
                        0.0,
                        &mut gx,
                    );
                    acc(x, gx);
                }
                if self.wants(w) {
                    let mut gw = vec![0.0; n * m];
                    gemm(
                        n,
                        rows,
                        m,
                        1.0,
                        MatRef::transposed(xv.data(), n),
                        MatRef::row_major(g, m),
                        0.0,
                        &mut gw,
                    );
                    acc(w, gw);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc(b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (rows, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(a) {
                    let mut ga = vec![0.0; rows * k];
                    gemm(
                        rows,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(g, n),
                        MatRef::transposed(bv.data(), n),
                        0.0,
                        &mut ga,
                    );
                    acc(a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        rows,
                        n,
                        1.0,
                        MatRef::transposed(av.data(), k),
                        MatRef::row_major(g, n),
                        0.0,
                        &mut gb,
                    );
                    acc(b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    acc(a, g.to_vec());
                }
                if self.wants(b) {
                    acc(b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    acc(a, g.to_vec());
                }
                if self.wants(b) {
                    acc(b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    acc(a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.wants(b) {
                    acc(b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, c) => acc(x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(x, g.to_vec()),
            Op::Sigmoid(x) => acc(x, g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Relu(x) => acc(
                x,
                g.iter()
                    .zip(self.value(x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Softplus(x) => acc(
                x,
                g.iter()
                    .zip(self.value(x).data())
                    .map(|(g, v)| g * sigmoid(*v))
                    .collect(),
            ),
            Op::Exp(x) => acc(x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Ln(x) => acc(x, g.iter().zip(self.value(x).data()).map(|(g, v)| g / v).collect()),
            Op::Square(x) => acc(
                x,
                g.iter().zip(self.value(x).data()).map(|(g, v)| 2.0 * g * v).collect(),
            ),
            Op::Clamp { x, lo, hi } => acc(
                x,
                g.iter()
                    .zip(self.value(x).data())
                    .map(|(g, v)| if *v >= lo && *v <= hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let mut gx = vec![0.0; out.len()];
                for ((dst, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let total: f64 = grow.iter().sum();
                    for ((d, gv), y) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d = gv - y.exp() * total;
                    }
                }
                acc(x, gx);
            }
            Op::Sum(x) => acc(x, vec![g[0]; self.value(x).len()]),
            Op::SliceCols { x, start, end } => {
                let xv = self.value(x);
                let (rows, c, w) = (xv.rows(), xv.cols(), end - start);
                let mut gx = vec![0.0; rows * c];
                for r in 0..rows {
                    gx[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(x, gx);
            }
            Op::TakeLast { x, index } => {
                let c = self.value(x).cols();
                let mut gx = vec![0.0; self.value(x).len()];
                for (r, gv) in g.iter().enumerate() {
                    gx[r * c + index] = *gv;
                }
                acc(x, gx);
            }
            Op::GumbelSoftmax {
                log_probs,
                ref noise,
                tau,
            } => {
                let lp = self.value(log_probs);
                let tau_v = self.scalar(tau);
                let (b, l, c) = (noise.shape()[0], noise.shape()[1], noise.shape()[2]);
                let mut glp = vec![0.0; b * c];
                let mut gtau = 0.0;
                for bi in 0..b {
                    let lrow = lp.row(bi);
                    for li in 0..l {
                        let off = (bi * l + li) * c;
                        let y = &out.data()[off..off + c];
                        let gy = &g[off..off + c];
                        let xi = &noise.data()[off..off + c];
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            // gradient w.r.t. the pre-softmax input u = s / tau
                            let du = y[k] * (gy[k] - dot);
                            let s = lrow[k] + xi[k];
                            glp[bi * c + k] += du / tau_v;
                            gtau -= du * s / (tau_v * tau_v);
                        }
                    }
                }
                if self.wants(log_probs) {
                    acc(log_probs, glp);
                }
                if self.wants(tau) {
                    acc(tau, vec![gtau]);
                }
            }
            Op::ComposeCode { gates, features } => {
                let (gv, fv) = (self.value(gates), self.value(features));
                let (b, l, k) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
                if self.wants(gates) {
                    let mut gg = vec![0.0; b * l];
                    for bi in 0..b {
                        let gc = &g[bi * k..(bi + 1) * k];
                        for li in 0..l {
                            let f = &fv.data()[(bi * l + li) * k..(bi * l + li + 1) * k];
                            gg[bi * l + li] = gc.iter().zip(f).map(|(a, b)| a * b).sum();
                        }
                    }
                    acc(gates, gg);
                }
                if self.wants(features) {
                    let mut gf = vec![0.0; b * l * k];
                    for bi in 0..b {
                        let gc = &g[bi * k..(bi + 1) * k];
                        for li in 0..l {
                            let w = gv.data()[bi * l + li];
                            let dst = &mut gf[(bi * l + li) * k..(bi * l + li + 1) * k];
                            dst.iter_mut().zip(gc).for_each(|(d, c)| *d = w * c);
                        }
                    }
                    acc(features, gf);
                }
            }
            Op::BernoulliLogLik { logits, ref target } => {
                let s = g[0];
                acc(
                    logits,
                    self.value(logits)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, t)| s * (t - sigmoid(*a)))
                        .collect(),
                );
            }
            Op::KlCategorical { log_q, ref log_p } => {
                let s = g[0];
                let c = log_p.len();
                let mut gq = vec![0.0; self.value(log_q).len()];
                for (dst, row) in gq.chunks_mut(c).zip(self.value(log_q).data().chunks(c)) {
                    for ((d, q), p) in dst.iter_mut().zip(row).zip(log_p.data()) {
                        let e = q.exp();
                        *d = s * e * (q - p + 1.0);
                    }
                }
                acc(log_q, gq);
            }
        }
    }

    /// Reverse sweep from a scalar `loss`. Overwrites the gradient of every
    /// parameter in `store` (parameters absent from the tape get zero) and
    /// clears the tape for the next step.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.reverse(loss)?;
        store.zero_grads();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(grad)) = (&node.op, grad) {
                let p = store.get_mut(*id);
                let dst = p.grad.data_mut();
                dst.iter_mut().zip(grad).for_each(|(d, v)| *d += v);
            }
        }
        self.nodes.clear();
        Ok(())
    }

    /// Gradients of a scalar `loss` with respect to arbitrary nodes; leaves the tape intact.
    pub fn grad_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.reverse(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                let shape = self.value(*v).shape().to_vec();
                match grads.get(v.0).cloned().flatten() {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_examples() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[vec![0.3, -2.0], vec![7.0, 1.5], vec![-1.0, 0.0]]));
        let b = store.add("b", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.affine(x, wv, bv).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::identity(2));
        let w = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 1.0]]));
        let w = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::full(&[2], 0.5));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 1.5]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let msg = tape.affine(x, w, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        let s = tape.activation(z, Activation::Sigmoid);
        assert_eq!(tape.value(s).data()[0], 0.5);
        let sp = tape.activation(z, Activation::Softplus);
        assert!((tape.value(sp).data()[0] - 2f64.ln()).abs() < 1e-15);
        let ls = tape.activation(z, Activation::LogSoftmaxRows);
        for v in tape.value(ls).data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_stays_open_interval_at_extremes() {
        assert!(sigmoid(-700.0) > 0.0);
        assert!(sigmoid(30.0) < 1.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(800.0) == 800.0);
    }

    #[test]
    fn backward_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2, 2]));

        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum(wv);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[1.0; 4]);
        assert!(tape.is_empty());

        let wv = tape.param(&store, w);
        let s = tape.sigmoid(wv);
        let loss = tape.sum(s);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[0.25; 4]);

        let _ = tape.param(&store, w);
        let c = tape.constant(Tensor::scalar(3.0));
        tape.backward(c, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2, 2]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        assert!(matches!(tape.backward(wv, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[3], 2.0));
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[4.0; 3]);
    }

    #[test]
    fn gumbel_softmax_rows_are_simplex() {
        let mut tape = Tape::new();
        let lp = tape.constant(t(&[vec![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]]));
        let tau = tape.constant(Tensor::scalar(1.0));
        let y = tape.gumbel_softmax(lp, Tensor::zeros(&[1, 2, 3]), tau).unwrap();
        let v = tape.value(y).data();
        for (a, b) in v.iter().zip([0.7, 0.2, 0.1, 0.7, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_code_weights_rows() {
        let mut tape = Tape::new();
        let g = tape.constant(t(&[vec![1.0, 0.5]]));
        let f = tape.constant(Tensor::new(vec![1, 2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.2, 0.8]).unwrap());
        let c = tape.compose_code(g, f).unwrap();
        let got = tape.value(c).data();
        for (a, b) in got.iter().zip([1.0, 0.1, 0.4]) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
