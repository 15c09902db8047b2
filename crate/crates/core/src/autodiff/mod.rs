//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Values are immutable once recorded. A [`Tape`] owns every intermediate of
//! one forward pass; [`Tape::backward`] walks it in reverse creation order and
//! accumulates parameter gradients into a [`ParamStore`]. All reductions run
//! in a fixed left-to-right order so two identical passes agree bit-for-bit.
//!
//! Structural ops (permute, slice, pad, roll, upsample, window partition,
//! im2col) are all expressed as one [`Tape::gather`] primitive: every output
//! element copies one input element or is zero. Its adjoint is a scatter-add
//! in ascending output order.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod params;

use std::collections::HashMap;
use std::rc::Rc;

pub use params::{ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Sentinel in a gather map: the output element is zero.
pub const ZERO: usize = usize::MAX;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Gather { a: Var, map: Rc<[usize]> },
    Reshape { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Exp { a: Var },
    Sum { a: Var },
    MaxPool { a: Var, argmax: Vec<usize> },
    Bce { logits: Var, targets: Vec<f64> },
    SmoothL1 { pred: Var, target: Vec<f64>, mask: Vec<bool>, divisor: f64, beta: f64 },
    CrossEntropy { logits: Var, targets: Vec<f64>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bound: HashMap<usize, Var>,
    attention_pairs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of non-parameter leaves created with [`Tape::input`].
#[derive(Debug, Default)]
pub struct Gradients {
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => {
            for (x, c) in g.iter_mut().zip(contribution) {
                *x += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            total += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
            attention_pairs: 0,
        }
    }

    /// A tape whose parameters are bound without gradient tracking.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    /// Query-key logit entries computed by attention on this tape.
    pub fn attention_pairs(&self) -> u64 {
        self.attention_pairs
    }

    pub(crate) fn count_attention_pairs(&mut self, pairs: u64) {
        self.attention_pairs += pairs;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn finish(&mut self, op_name: &'static str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        value.check_finite(op_name)?;
        Ok(self.push(value, op, rg))
    }

    /// Constant leaf (never receives a gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable non-parameter leaf; its gradient is reported in [`Gradients`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter. Repeated binds return the same leaf, so
    /// gradients from every use accumulate into one slot.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::ParamMismatch(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let value = store.get(idx).value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
            param: Some(idx),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(idx, v);
        Ok(v)
    }

    /// Matrix product. Either both operands are 2-D (`[m,k]·[k,n]`) or both
    /// have the same leading batch dimensions (`[..,m,k]·[..,k,n]`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(mismatch());
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 || sa[..r - 2] != sb[..r - 2] {
            return Err(mismatch());
        }
        let batch = numel(&sa[..r - 2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            out.extend(kernels::gemm(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.finish(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::Matmul { a, b, batch, m, k, n },
            rg,
        )
    }

    /// Elementwise sum. `b` may have the shape of a suffix of `a`'s shape, in
    /// which case it is broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let inner = self.value(b).len();
        let db = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + db[i % inner])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.finish("add", Tensor::from_parts(shape, out), Op::Add { a, b }, rg)
    }

    /// Elementwise product of equally-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.finish("mul", Tensor::from_parts(shape, out), Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.finish("scale", Tensor::from_parts(shape, out), Op::Scale { a, factor }, rg)
    }

    /// `out[i] = a[map[i]]`, or zero where `map[i] == ZERO`.
    pub fn gather(&mut self, a: Var, shape: Vec<usize>, map: Rc<[usize]>) -> Result<Var> {
        if map.len() != numel(&shape) {
            return Err(Error::shape(
                "gather",
                format!("map of {} entries for shape {shape:?}", map.len()),
            ));
        }
        let src = self.value(a).data();
        if let Some(&bad) = map.iter().find(|&&i| i != ZERO && i >= src.len()) {
            return Err(Error::Index {
                index: bad,
                len: src.len(),
            });
        }
        let out: Vec<f64> = map
            .iter()
            .map(|&i| if i == ZERO { 0.0 } else { src[i] })
            .collect();
        let rg = self.rg(a);
        self.finish("gather", Tensor::from_parts(shape, out), Op::Gather { a, map }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap();
        let out = softmax_rows(self.value(a).data(), n);
        let rg = self.rg(a);
        self.finish("softmax_last", Tensor::from_parts(shape, out), Op::Softmax { a }, rg)
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance, then
    /// applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {shape:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let rows = xd.len() / c;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().fold(0.0, |s, v| s + v) / c as f64;
            let var = row.iter().fold(0.0, |s, v| s + (v - mean) * (v - mean)) / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.finish(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.finish("gelu", Tensor::from_parts(shape, out), Op::Gelu { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.finish("exp", Tensor::from_parts(shape, out), Op::Exp { a }, rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.finish("sum", Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// 2×2 max pooling with stride 2 over the last two axes (floor semantics).
    pub fn maxpool2x2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[shape.len() - 2] < 2 || shape[shape.len() - 1] < 2 {
            return Err(Error::shape("maxpool2x2", format!("{shape:?}")));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (ho, wo) = (h / 2, w / 2);
        let outer = numel(&shape[..r - 2]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * ho * wo);
        let mut argmax = Vec::with_capacity(outer * ho * wo);
        for o in 0..outer {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = ZERO;
                    let mut best_v = f64::NEG_INFINITY;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = o * h * w + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > best_v {
                            best_v = src[idx];
                            best = idx;
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let mut oshape = shape[..r - 2].to_vec();
        oshape.extend([ho, wo]);
        let rg = self.rg(a);
        self.finish(
            "maxpool2x2",
            Tensor::from_parts(oshape, out),
            Op::MaxPool { a, argmax },
            rg,
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.shape(logits), targets.shape()),
            ));
        }
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let total = z.iter().zip(targets.data()).fold(0.0, |s, (&z, &y)| {
            s + (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        });
        let rg = self.rg(logits);
        self.finish(
            "bce_with_logits",
            Tensor::scalar(total / n),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        )
    }

    /// `sum over mask of smooth_l1(pred - target) / divisor`; a zero divisor
    /// yields a constant zero.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: &Tensor,
        mask: &[bool],
        divisor: f64,
        beta: f64,
    ) -> Result<Var> {
        if self.shape(pred) != target.shape() || mask.len() != target.len() {
            return Err(Error::shape(
                "smooth_l1",
                format!("{:?} vs {:?}", self.shape(pred), target.shape()),
            ));
        }
        if divisor == 0.0 {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        let p = self.value(pred).data();
        let mut total = 0.0;
        for i in 0..p.len() {
            if mask[i] {
                let d = (p[i] - target.data()[i]).abs();
                total += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
            }
        }
        let rg = self.rg(pred);
        self.finish(
            "smooth_l1",
            Tensor::scalar(total / divisor),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
                divisor,
                beta,
            },
            rg,
        )
    }

    /// Mean over rows of `-sum(y * log softmax(logits))` for `[rows, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape != targets.shape() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{shape:?} vs {:?}", targets.shape()),
            ));
        }
        let k = shape[1];
        let probs = softmax_rows(self.value(logits).data(), k);
        let mut total = 0.0;
        for (p, y) in probs.iter().zip(targets.data()) {
            if *y != 0.0 {
                total -= y * p.ln();
            }
        }
        let rg = self.rg(logits);
        self.finish(
            "cross_entropy",
            Tensor::scalar(total / shape[0] as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Runs the reverse pass from scalar `loss`, adding parameter gradients
    /// into `store` and returning gradients of [`Tape::input`] leaves.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut result = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                    match node.param {
                        Some(p) => store.accumulate_grad(p, &t),
                        None => {
                            result.inputs.insert(Var(idx), t);
                        }
                    }
                }
                op => self.backprop(op, &node.value, g, &mut grads),
            }
        }
        Ok(result)
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if self.rg(v) {
            accumulate(&mut grads[v.0], contribution);
        }
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => unreachable!(),
            &Op::Matmul { a, b, batch, m, k, n } => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    let mut ga = Vec::with_capacity(batch * m * k);
                    for bi in 0..batch {
                        let bt = kernels::transpose(&db[bi * k * n..(bi + 1) * k * n], k, n);
                        ga.extend(kernels::gemm(&g[bi * m * n..(bi + 1) * m * n], &bt, m, n, k));
                    }
                    self.send(grads, a, ga);
                }
                if self.rg(b) {
                    let mut gb = Vec::with_capacity(batch * k * n);
                    for bi in 0..batch {
                        let at = kernels::transpose(&da[bi * m * k..(bi + 1) * m * k], m, k);
                        gb.extend(kernels::gemm(&at, &g[bi * m * n..(bi + 1) * m * n], k, m, n));
                    }
                    self.send(grads, b, gb);
                }
            }
            &Op::Add { a, b } => {
                if self.rg(b) {
                    let inner = self.value(b).len();
                    let mut gb = vec![0.0; inner];
                    for chunk in g.chunks_exact(inner) {
                        for (x, c) in gb.iter_mut().zip(chunk) {
                            *x += c;
                        }
                    }
                    self.send(grads, b, gb);
                }
                self.send(grads, a, g);
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    self.send(grads, a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.rg(b) {
                    self.send(grads, b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale { a, factor } => {
                self.send(grads, a, g.iter().map(|x| x * factor).collect());
            }
            Op::Gather { a, map } => {
                let mut ga = vec![0.0; self.value(*a).len()];
                for (&src, gv) in map.iter().zip(&g) {
                    if src != ZERO {
                        ga[src] += gv;
                    }
                }
                self.send(grads, *a, ga);
            }
            &Op::Reshape { a } => self.send(grads, a, g),
            &Op::Softmax { a } => {
                let n = *out.shape().last().unwrap();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot = yr.iter().zip(gr).fold(0.0, |s, (y, g)| s + y * g);
                    for j in 0..n {
                        ga[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = *out.shape().last().unwrap();
                let gm = self.value(*gamma).data();
                let rows = rstd.len();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gm[j];
                        sum_d += d;
                        sum_dh += d * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let d = gr[j] * gm[j];
                        gx[r * c + j] = rstd[r] / cf * (cf * d - sum_d - hr[j] * sum_dh);
                    }
                }
                self.send(grads, *x, gx);
                self.send(grads, *gamma, gg);
                self.send(grads, *beta, gbeta);
            }
            &Op::Gelu { a } => {
                let x = self.value(a).data();
                self.send(grads, a, g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            &Op::Exp { a } => {
                self.send(grads, a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect());
            }
            &Op::Sum { a } => {
                let n = self.value(a).len();
                self.send(grads, a, vec![g[0]; n]);
            }
            Op::MaxPool { a, argmax } => {
                let mut ga = vec![0.0; self.value(*a).len()];
                for (&src, gv) in argmax.iter().zip(&g) {
                    ga[src] += gv;
                }
                self.send(grads, *a, ga);
            }
            Op::Bce { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = g[0] / z.len() as f64;
                let gz = z
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (1.0 / (1.0 + (-z).exp()) - y) * scale)
                    .collect();
                self.send(grads, *logits, gz);
            }
            Op::SmoothL1 { pred, target, mask, divisor, beta } => {
                let p = self.value(*pred).data();
                let gp = (0..p.len())
                    .map(|i| {
                        if !mask[i] {
                            return 0.0;
                        }
                        let d = p[i] - target[i];
                        let dl = if d.abs() < *beta { d / beta } else { d.signum() };
                        dl * g[0] / divisor
                    })
                    .collect();
                self.send(grads, *pred, gp);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = self.shape(*logits)[0] as f64;
                let k = self.shape(*logits)[1];
                let mut gl = vec![0.0; probs.len()];
                for r in 0..probs.len() / k {
                    let ysum = targets[r * k..(r + 1) * k].iter().fold(0.0, |s, y| s + y);
                    for j in 0..k {
                        let i = r * k + j;
                        gl[i] = (probs[i] * ysum - targets[i]) * g[0] / rows;
                    }
                }
                self.send(grads, *logits, gl);
            }
        }
    }
}

/// Composite operations built from the primitives above.
impl Tape {
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `x[N, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (oshape, map) = maps::permute(&shape, perm)?;
        self.gather(a, oshape, map.into())
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (oshape, map) = maps::slice(&shape, axis, start, len)?;
        self.gather(a, oshape, map.into())
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (oshape, map) = maps::pad(&shape, axis, before, after)?;
        self.gather(a, oshape, map.into())
    }

    /// Torus roll: `out[i] = a[(i - shift) mod n]` along `axis`.
    pub fn roll(&mut self, a: Var, axis: usize, shift: isize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let map = maps::roll(&shape, axis, shift)?;
        self.gather(a, shape, map.into())
    }

    /// Nearest-neighbour ×2 upsampling of the last two axes.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (oshape, map) = maps::upsample2x(&shape)?;
        self.gather(a, oshape, map.into())
    }

    /// Stacks equally-shaped values along a new trailing axis, composed from
    /// zero-padding gathers and additions.
    pub fn stack_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("stack_last", "nothing to stack"))?;
        let shape = self.shape(first).to_vec();
        let k = parts.len();
        let mut oshape = shape.clone();
        oshape.push(k);
        let n = numel(&shape);
        let mut acc: Option<Var> = None;
        for (j, &p) in parts.iter().enumerate() {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::shape(
                    "stack_last",
                    format!("{shape:?} vs {:?}", self.shape(p)),
                ));
            }
            let map: Rc<[usize]> = (0..n * k)
                .map(|i| if i % k == j { i / k } else { ZERO })
                .collect();
            let placed = self.gather(p, oshape.clone(), map)?;
            acc = Some(match acc {
                None => placed,
                Some(prev) => self.add(prev, placed)?,
            });
        }
        Ok(acc.unwrap())
    }

    /// Index `i` of the trailing axis, dropping that axis.
    pub fn select_last(&mut self, a: Var, i: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = *shape.last().unwrap();
        if i >= k {
            return Err(Error::Index { index: i, len: k });
        }
        let oshape = shape[..shape.len() - 1].to_vec();
        let map: Rc<[usize]> = (0..numel(&oshape)).map(|o| o * k + i).collect();
        self.gather(a, oshape, map)
    }

    /// 2-D convolution of `x[Cin,H,W]` with `weight[Cout,Cin,k,k]` and
    /// optional `bias[Cout]`, via im2col and one matrix product.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, stride {stride}"),
            ));
        }
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        let (cols, ho, wo) = maps::im2col(&xs, k, stride, padding)?;
        let patches = self.gather(x, vec![ho * wo, cin * k * k], cols.into())?;
        let wmat = self.reshape(weight, &[cout, cin * k * k])?;
        let wt = self.transpose_last2(wmat)?;
        let y = self.linear(patches, wt, bias)?;
        let yt = self.transpose_last2(y)?;
        self.reshape(yt, &[cout, ho, wo])
    }
}

/// Index maps for [`Tape::gather`]; also used by the standalone tensor
/// helpers so that plain and recorded paths share one definition.
pub mod maps {
    use super::*;

    pub fn permute(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("{perm:?} for {shape:?}")));
        }
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let ist = strides(shape);
        let pst: Vec<usize> = perm.iter().map(|&p| ist[p]).collect();
        let mut map = Vec::with_capacity(numel(shape));
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..numel(shape) {
            map.push(off);
            for d in (0..r).rev() {
                idx[d] += 1;
                off += pst[d];
                if idx[d] < oshape[d] {
                    break;
                }
                off -= pst[d] * oshape[d];
                idx[d] = 0;
            }
        }
        Ok((oshape, map))
    }

    fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
    }

    pub fn slice(
        shape: &[usize],
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} [{start}, {}) of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split(shape, axis);
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for i in start..start + len {
                for j in 0..inner {
                    map.push((o * n + i) * inner + j);
                }
            }
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        Ok((oshape, map))
    }

    pub fn pad(
        shape: &[usize],
        axis: usize,
        before: usize,
        after: usize,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        if axis >= shape.len() {
            return Err(Error::shape("pad", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split(shape, axis);
        let m = n + before + after;
        let mut map = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            for i in 0..m {
                for j in 0..inner {
                    map.push(if i < before || i >= before + n {
                        ZERO
                    } else {
                        (o * n + i - before) * inner + j
                    });
                }
            }
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = m;
        Ok((oshape, map))
    }

    pub fn roll(shape: &[usize], axis: usize, shift: isize) -> Result<Vec<usize>> {
        if axis >= shape.len() {
            return Err(Error::shape("roll", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split(shape, axis);
        let s = shift.rem_euclid(n as isize) as usize;
        let mut map = Vec::with_capacity(numel(shape));
        for o in 0..outer {
            for i in 0..n {
                let src = (i + n - s) % n;
                for j in 0..inner {
                    map.push((o * n + src) * inner + j);
                }
            }
        }
        Ok(map)
    }

    pub fn upsample2x(shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let r = shape.len();
        if r < 2 {
            return Err(Error::shape("upsample2x", format!("{shape:?}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let outer = numel(&shape[..r - 2]);
        let mut map = Vec::with_capacity(outer * 4 * h * w);
        for o in 0..outer {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    map.push(o * h * w + (i / 2) * w + j / 2);
                }
            }
        }
        let mut oshape = shape[..r - 2].to_vec();
        oshape.extend([2 * h, 2 * w]);
        Ok((oshape, map))
    }

    /// Columns of a `[Cin,H,W]` input for a `k×k` kernel: rows are output
    /// positions, columns are `(cin, ki, kj)` in weight order.
    pub fn im2col(
        shape: &[usize],
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<(Vec<usize>, usize, usize)> {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {shape:?}"),
            ));
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let mut map = Vec::with_capacity(ho * wo * c * k * k);
        for oi in 0..ho {
            for oj in 0..wo {
                for ci in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let y = (oi * stride + ki) as isize - padding as isize;
                            let x = (oj * stride + kj) as isize - padding as isize;
                            map.push(if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                ZERO
                            } else {
                                (ci * h + y as usize) * w + x as usize
                            });
                        }
                    }
                }
            }
        }
        Ok((map, ho, wo))
    }

    /// Applies a gather map to a plain tensor.
    pub fn apply(t: &Tensor, shape: Vec<usize>, map: &[usize]) -> Tensor {
        let src = t.data();
        let data = map
            .iter()
            .map(|&i| if i == ZERO { 0.0 } else { src[i] })
            .collect();
        Tensor::from_parts(shape, data)
    }
}

#[cfg(test)]
mod tests;
