//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] is built per forward pass. Leaves either borrow parameter
//! tensors (no copy) or own intermediate values. Only nodes that transitively
//! depend on a gradient-requiring leaf take part in the backward sweep, so
//! frozen weights cost one `dx` product per linear layer and nothing more.

use std::borrow::Cow;

use crate::prompt::cdc;
use crate::scalar::{gelu, gelu_grad, Scalar};
use crate::tensor::{layer_norm, softmax_rows, NormCache, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    Gelu(Var),
    Softmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    RepeatRows(Var),
    Cdc {
        x: Var,
        w: Var,
        b: Var,
        theta: T,
        height: usize,
        width: usize,
        cols: Tensor<T>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Tensor<T>,
    },
    NegCosine {
        a: Var,
        b: Var,
        stop_grad: bool,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Borrowed leaf; `trainable` decides whether gradients reach it.
    pub fn leaf(&mut self, t: &'a Tensor<T>, trainable: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, trainable)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn owned_leaf(&mut self, t: Tensor<T>, trainable: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::MatMulNT(a, b), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let v = self.value(x).linear(self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Cow::Owned(v), Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Scale(a, s), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (v, cache) = layer_norm(self.value(x), self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Cow::Owned(v),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Softmax(x), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice_rows(start, end);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::SliceRows(x, start), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice_cols(start, end);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::SliceCols(x, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(v), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_rows();
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::MeanRows(x), rg)
    }

    pub fn repeat_rows(&mut self, x: Var, count: usize) -> Var {
        let v = self.value(x).repeat_rows(count);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::RepeatRows(x), rg)
    }

    /// Central difference 3×3 convolution on a `(height·width) × c_in` grid.
    pub fn cdc(&mut self, x: Var, w: Var, b: Var, theta: T, height: usize, width: usize) -> Var {
        let cols = cdc::im2col(self.value(x), height, width);
        let v = cdc::forward_from_cols(&cols, self.value(x), self.value(w), self.value(b), theta);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Cow::Owned(v),
            Op::Cdc {
                x,
                w,
                b,
                theta,
                height,
                width,
                cols,
            },
            rg,
        )
    }

    /// Softmax cross-entropy of a `1×K` logit row against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let probs = softmax_rows(self.value(logits));
        let p = probs.get(0, label).max(T::min_positive_value());
        let v = Tensor::from_vec(1, 1, vec![-p.ln()]);
        let rg = self.rg(logits);
        self.push(
            Cow::Owned(v),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        )
    }

    /// `-⟨a/‖a‖, b/‖b‖⟩`; with `stop_grad` no gradient reaches `b`.
    pub fn neg_cosine(&mut self, a: Var, b: Var, stop_grad: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let v = -va.dot(vb) / (va.norm() * vb.norm());
        let rg = self.rg(a) || (!stop_grad && self.rg(b));
        self.push(
            Cow::Owned(Tensor::from_vec(1, 1, vec![v])),
            Op::NegCosine { a, b, stop_grad },
            rg,
        )
    }

    /// Backpropagates from a `1×1` node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        self.backward_with(root, Tensor::full(1, 1, T::one()))
    }

    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.shape(), self.value(root).shape());
        if self.rg(root) {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<'a, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, d: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Linear { x, w, b } => {
                if self.rg(*x) {
                    acc(*x, g.matmul_t(self.value(*w)));
                }
                if self.rg(*w) {
                    acc(*w, self.value(*x).t_matmul(g));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        acc(*b, column_sums(g));
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let gv = self.value(*gamma);
                if self.rg(*gamma) {
                    acc(*gamma, column_sums(&g.zip_map(&cache.xhat, |a, b| a * b)));
                }
                if self.rg(*beta) {
                    acc(*beta, column_sums(g));
                }
                if self.rg(*x) {
                    let (rows, d) = g.shape();
                    let dn = T::from_usize(d).unwrap();
                    let mut dx = Tensor::zeros(rows, d);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = cache.xhat.row(r);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            let dxh = gr[c] * gv.data()[c];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xh[c];
                        }
                        let is = cache.inv_std[r];
                        let out = dx.row_mut(r);
                        for c in 0..d {
                            let dxh = gr[c] * gv.data()[c];
                            out[c] = is * (dxh - s1 / dn - xh[c] * s2 / dn);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(x) => {
                let d = g.zip_map(self.value(*x), |gi, xi| gi * gelu_grad(xi));
                acc(*x, d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (rows, cols) = g.shape();
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::SliceRows(x, start) => {
                let (rows, cols) = self.value(*x).shape();
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.value(*x).shape();
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.rg(p) {
                        acc(p, g.slice_rows(off, off + n));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).cols();
                    if self.rg(p) {
                        acc(p, g.slice_cols(off, off + n));
                    }
                    off += n;
                }
            }
            Op::MeanRows(x) => {
                let rows = self.value(*x).rows();
                let n = T::from_usize(rows).unwrap();
                acc(*x, g.scale(T::one() / n).repeat_rows(rows));
            }
            Op::RepeatRows(x) => acc(*x, column_sums(g)),
            Op::Cdc {
                x,
                w,
                b,
                theta,
                height,
                width,
                cols,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.rg(*w) {
                    acc(*w, cdc::weight_grad(cols, xv, g, *theta));
                }
                if self.rg(*b) {
                    acc(*b, column_sums(g));
                }
                if self.rg(*x) {
                    acc(*x, cdc::input_grad(g, wv, *theta, *height, *width));
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let scale = g.get(0, 0);
                let mut d = probs.clone();
                d.set(0, *label, d.get(0, *label) - T::one());
                acc(*logits, d.scale(scale));
            }
            Op::NegCosine { a, b, stop_grad } => {
                let scale = g.get(0, 0);
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, neg_cosine_grad(va, vb).scale(scale));
                }
                if !stop_grad && self.rg(*b) {
                    acc(*b, neg_cosine_grad(vb, va).scale(scale));
                }
            }
        }
    }
}

/// d/da of `-⟨a,b⟩/(‖a‖‖b‖)`.
fn neg_cosine_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let na = a.norm();
    let nb = b.norm();
    let cos = a.dot(b) / (na * nb);
    let inv = T::one() / (na * nb);
    let k = cos / (na * na);
    a.zip_map(b, |ai, bi| -(bi * inv - ai * k))
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o = *o + v;
        }
    }
    out
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when no gradient reached the node (frozen or disconnected).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
