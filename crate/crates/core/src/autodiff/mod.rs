//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in forward order. Each node owns its
//! forward value plus whatever context its backward rule needs (im2col
//! columns, normalized activations, softmax probabilities). [`Graph::backward`]
//! walks the tape once in reverse and returns gradients keyed by [`ParamId`].
//!
//! ```
//! use rollback_core::autodiff::{Graph, ParamId};
//! use rollback_core::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.param(ParamId::new(0, 0), Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(ParamId::new(0, 0)).unwrap().data(), &[6.0, -2.0]);
//! ```

pub(crate) mod conv;
pub(crate) mod norm;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use self::conv::ConvGeom;
use self::norm::BnLayout;

/// Identity of a trainable tensor: parameter group and position within the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub group: usize,
    pub index: usize,
}

impl ParamId {
    pub const fn new(group: usize, index: usize) -> Self {
        Self { group, index }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    LeakyRelu(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    /// Gradient for `id`, or zeros of `shape` when the parameter was not on the tape.
    pub fn get_or_zeros(&self, id: ParamId, shape: &[usize]) -> Tensor<T> {
        self.map
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.map.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A single-use recording of a forward computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn two_d(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        &[r, c] => Ok((r, c)),
        _ => Err(Error::Shape(format!("{what} expects a 2-D tensor, got {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A trainable leaf; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d(self.value(a).shape(), "matmul lhs")?;
        let (k2, n) = two_d(self.value(b).shape(), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} × {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds a length-M bias to every row of an N×M matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = two_d(self.value(x).shape(), "add_bias")?;
        if self.value(bias).shape() != [m] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match rows of width {m}",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `max(x, slope·x)`; the derivative at exactly 0 is taken as 1.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if !(slope >= T::zero() && slope < T::one()) {
            return Err(Error::Validation(format!(
                "leaky_relu slope must lie in [0, 1), got {slope}"
            )));
        }
        let out = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { slope * v });
        let rg = self.rg(x);
        Ok(self.push(out, Op::LeakyRelu(x, slope), rg))
    }

    /// Cross-correlation of an N×C×H×W input with an F×C×kh×kw kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.f] {
                return Err(Error::Shape(format!(
                    "conv2d bias {:?} does not match {} filters",
                    self.value(b).shape(),
                    geom.f
                )));
            }
        }
        let cols = conv::im2col(self.value(x).data(), &geom);
        let out = conv::forward(
            &cols,
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::from_parts(geom.out_shape(), out);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b: bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization over N×C or N×C×… input.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// blended into `stats` with `config.momentum` (variance unbiased); in
    /// evaluation mode `stats` are used as-is and left untouched.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        config: BatchNormConfig,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let layout = BnLayout::from_shape(&shape)
            .ok_or_else(|| Error::Shape(format!("batch_norm expects N×C…, got {shape:?}")))?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [layout.c] {
                return Err(Error::Shape(format!(
                    "batch_norm {what} {:?} does not match {} channels",
                    self.value(v).shape(),
                    layout.c
                )));
            }
        }
        if stats.mean.len() != layout.c || stats.var.len() != layout.c {
            return Err(Error::Shape(format!(
                "batch_norm running stats do not match {} channels",
                layout.c
            )));
        }
        let train = mode == Mode::Train;
        if train && layout.n < 2 {
            return Err(Error::InvalidBatch(format!(
                "batch_norm in training mode needs at least 2 samples, got {}",
                layout.n
            )));
        }
        let fwd = norm::forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            layout,
            (!train).then_some((stats.mean.as_slice(), stats.var.as_slice())),
            T::c(config.epsilon),
        );
        if let Some((mean, var)) = &fwd.batch {
            let m = T::c(config.momentum);
            let keep = T::one() - m;
            for c in 0..layout.c {
                stats.mean[c] = keep * stats.mean[c] + m * mean[c];
                stats.var[c] = keep * stats.var[c] + m * var[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, fwd.out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                train,
            },
            rg,
        ))
    }

    /// Spatial mean of each channel: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "global_avg_pool expects N×C×H×W, got {shape:?}"
            )));
        }
        let plane = shape[2] * shape[3];
        let inv = T::one() / T::c(plane as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![shape[0], shape[1]], out),
            Op::GlobalAvgPool(x),
            rg,
        ))
    }

    /// Mean over rows of `-yᵀ log softmax(logits)` with one-hot targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let (n, l) = two_d(self.value(logits).shape(), "softmax_cross_entropy")?;
        if targets.shape() != [n, l] {
            return Err(Error::Shape(format!(
                "targets {:?} do not match logits {:?}",
                targets.shape(),
                [n, l]
            )));
        }
        if l < 2 {
            return Err(Error::Validation(format!("need at least 2 classes, got {l}")));
        }
        for (i, row) in targets.data().chunks(l).enumerate() {
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || zeros != l - 1 {
                return Err(Error::Validation(format!("target row {i} is not one-hot")));
            }
        }
        let probs = softmax_rows(self.value(logits).data(), l);
        // Loss from log-sum-exp of the raw row, so saturated rows never take ln(0).
        let mut total = T::zero();
        for (row, y) in self.value(logits).data().chunks(l).zip(targets.data().chunks(l)) {
            let k = y.iter().position(|&v| v == T::one()).expect("validated one-hot");
            total = total + (log_sum_exp(row) - row[k]);
        }
        let value = total / T::c(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// Cross-entropy against integer class labels.
    pub fn cross_entropy_labels(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, l) = two_d(self.value(logits).shape(), "cross_entropy_labels")?;
        let targets = one_hot::<T>(labels, l)?;
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        self.softmax_cross_entropy(logits, &targets)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                out.insert(*id, Tensor::from_parts(node.value.shape().to_vec(), g));
            }
            Op::MatMul(a, b) => {
                let (m, k) = two_d(self.value(*a).shape(), "").expect("checked");
                let n = node.value.shape()[1];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        (1, k as isize),
                        &g,
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                        (n as isize, 1),
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.rg(*bias) {
                    let m = self.value(*bias).len();
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
                if self.rg(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = g.iter().zip(self.value(*b).data()).map(|(&u, &v)| u * v).collect();
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = g.iter().zip(self.value(*a).data()).map(|(&u, &v)| u * v).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, g.iter().map(|&u| u * *s).collect());
            }
            Op::Sum(x) => {
                accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
            }
            Op::LeakyRelu(x, slope) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&u, &v)| if v >= T::zero() { u } else { u * *slope })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let cg = conv::backward(&g, cols, self.value(*w).data(), geom, self.rg(*x));
                if self.rg(*w) {
                    accumulate(grads, *w, cg.weight);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        accumulate(grads, *b, cg.bias);
                    }
                }
                if let Some(dx) = cg.input {
                    accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            } => {
                let bg = norm::backward(
                    &g,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    *layout,
                    *train,
                );
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, bg.gamma);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, bg.beta);
                }
                if self.rg(*x) {
                    accumulate(grads, *x, bg.input);
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let plane = shape[2] * shape[3];
                let inv = T::one() / T::c(plane as f64);
                let dx = g
                    .iter()
                    .flat_map(|&u| std::iter::repeat_n(u * inv, plane))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let n = self.value(*logits).shape()[0];
                let scale = g[0] / T::c(n as f64);
                let dl = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| (p - y) * scale)
                    .collect();
                accumulate(grads, *logits, dl);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Row-wise softmax of an `rows × width` matrix, stabilized by the row max.
pub fn softmax_rows<T: Real>(logits: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// One-hot encoding of integer labels into a `labels.len() × classes` matrix.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[i * classes + y] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}
