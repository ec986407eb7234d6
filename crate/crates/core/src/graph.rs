//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in execution order, so a single reverse sweep over the tape
//! visits each node after all of its consumers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::param::{ParamId, ParamStore};
use crate::{Error, Real, Result, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MatMul(Var, Var),
    SwapAxes(Var, usize, usize),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Gather {
        src: Var,
        index: Vec<Option<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    position_log: Vec<String>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            position_log: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Names of position tables added during this pass, in order.
    pub fn position_log(&self) -> &[String] {
        &self.position_log
    }

    pub(crate) fn note_position_add(&mut self, table: &str) {
        self.position_log.push(table.into());
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf | Op::Param(_) => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        if cfg!(debug_assertions) && !inputs.is_empty() && inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
            debug_assert!(value.is_finite(), "non-finite output from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A leaf that receives a gradient (used for gradient checks on raw tensors).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Places a parameter on the tape. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), &[]);
        self.nodes[v.0].needs_grad = !p.frozen;
        v
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(nb) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o = *o + y;
            }
        }
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * y;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = *o * c;
        }
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Batch dimensions must
    /// match, or one side must be a plain matrix that is shared across the
    /// other side's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![F::zero(); plan.batch * plan.m * plan.n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for t in 0..plan.batch {
                let (ao, bo) = plan.offsets(t);
                mm(
                    &av[ao..ao + plan.m * plan.k],
                    &bv[bo..bo + plan.k * plan.n],
                    &mut out[t * plan.m * plan.n..(t + 1) * plan.m * plan.n],
                    plan.m,
                    plan.k,
                    plan.n,
                );
            }
        }
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn swap_axes(&mut self, x: Var, i: usize, j: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        for axis in [i, j] {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
        }
        let value = permute_swap(self.value(x), i, j);
        Ok(self.push(value, Op::SwapAxes(x, i, j), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank });
        }
        self.swap_axes(x, rank - 2, rank - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut max = F::neg_infinity();
                for k in 0..len {
                    max = max.max(data[at(k)]);
                }
                let mut sum = F::zero();
                for k in 0..len {
                    let e = (data[at(k)] - max).exp();
                    data[at(k)] = e;
                    sum = sum + e;
                }
                for k in 0..len {
                    data[at(k)] = data[at(k)] / sum;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalisation over the last axis: `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = F::of(eps);
        let n = F::of(d as f64);
        let mut out = self.value(x).clone();
        let rows = out.numel() / d;
        let mut xhat = vec![F::zero(); out.numel()];
        let mut rstd = vec![F::zero(); rows];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for (r, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
            let mean = row.iter().fold(F::zero(), |acc, &v| acc + v) / n;
            let var = row
                .iter()
                .fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                / n;
            let s = F::one() / (var + eps).sqrt();
            rstd[r] = s;
            for (k, v) in row.iter_mut().enumerate() {
                let h = (*v - mean) * s;
                xhat[r * d + k] = h;
                *v = h * g[k] + b[k];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let u = *v;
            *v = half * u * (F::one() + (c * (u + a * u * u * u)).tanh());
        }
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Builds a tensor of `shape` whose flat entry `i` is `src[index[i]]`, or
    /// zero where the index is `None`. The backward pass scatter-adds.
    pub fn gather(&mut self, src: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let sv = self.value(src).data();
        let mut data = Vec::with_capacity(index.len());
        for ix in &index {
            data.push(match ix {
                Some(i) => *sv.get(*i).ok_or(Error::InvalidShape {
                    shape: self.shape(src).to_vec(),
                    len: *i,
                })?,
                None => F::zero(),
            });
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Gather { src, index }, &[src]))
    }

    /// Selects rows along the first axis.
    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        let row_len: usize = shape[1..].iter().product();
        let mut index = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= shape[0] {
                return Err(Error::InvalidShape {
                    shape: shape.clone(),
                    len: r,
                });
            }
            index.extend((r * row_len..(r + 1) * row_len).map(Some));
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.gather(src, index, &out_shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: first.len(),
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`, with
    /// logits shaped `[B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        let mut total = F::zero();
        for (r, (row, &label)) in probs.chunks_exact_mut(c).zip(labels).enumerate() {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
            // -log p from the shifted logits, so a saturated probability
            // never turns into log(0).
            total = total + (sum.ln() - (z[r * c + label] - max));
        }
        let loss = total / F::of(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let gy = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<F>, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()]);
            f(g);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| {
                    let nb = g.len();
                    for chunk in gy.chunks_exact(nb) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(bv) {
                        *g = *g + d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(gy).zip(av) {
                        *g = *g + d * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                for (g, &d) in g.iter_mut().zip(gy) {
                    *g = *g + d * *c;
                }
            }),
            Op::MatMul(a, b) => {
                let plan = MatmulPlan::new(nodes[a.0].value.shape(), nodes[b.0].value.shape())
                    .expect("validated in forward");
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let (m, k, n) = (plan.m, plan.k, plan.n);
                acc(*a, &mut |g| {
                    for t in 0..plan.batch {
                        let (ao, bo) = plan.offsets(t);
                        mm_bt(
                            &gy[t * m * n..(t + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut g[ao..ao + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for t in 0..plan.batch {
                        let (ao, bo) = plan.offsets(t);
                        mm_at(
                            &av[ao..ao + m * k],
                            &gy[t * m * n..(t + 1) * m * n],
                            &mut g[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::SwapAxes(x, i, j) => acc(*x, &mut |g| {
                let gt = Tensor::new(node.value.shape().to_vec(), gy.to_vec()).expect("shape");
                add_into(g, permute_swap(&gt, *i, *j).data());
            }),
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let mut dot = F::zero();
                            for k in 0..len {
                                dot = dot + gy[at(k)] * y[at(k)];
                            }
                            for k in 0..len {
                                g[at(k)] = g[at(k)] + y[at(k)] * (gy[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = nodes[gain.0].value.data();
                let d = gv.len();
                let n = F::of(d as f64);
                acc(*x, &mut |g| {
                    for r in 0..rstd.len() {
                        let (dy, h) = (&gy[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for k in 0..d {
                            let dh = dy[k] * gv[k];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * h[k];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for k in 0..d {
                            let dh = dy[k] * gv[k];
                            g[r * d + k] = g[r * d + k] + rstd[r] * (dh - mean_dh - h[k] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (dy, h) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for k in 0..d {
                            g[k] = g[k] + dy[k] * h[k];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for dy in gy.chunks_exact(d) {
                        add_into(g, dy);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
                let three = F::of(3.0);
                acc(*x, &mut |g| {
                    for ((g, &d), &u) in g.iter_mut().zip(gy).zip(xv) {
                        let t = (c * (u + a * u * u * u)).tanh();
                        let dt = (F::one() - t * t) * c * (F::one() + three * a * u * u);
                        *g = *g + d * (half * (F::one() + t) + half * u * dt);
                    }
                });
            }
            Op::Gather { src, index } => acc(*src, &mut |g| {
                for (ix, &d) in index.iter().zip(gy) {
                    if let Some(i) = ix {
                        g[*i] = g[*i] + d;
                    }
                }
            }),
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.numel() / outer;
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis] * inner;
                    acc(p, &mut |g| {
                        for o in 0..outer {
                            add_into(
                                &mut g[o * len..(o + 1) * len],
                                &gy[o * total + offset..o * total + offset + len],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.len() / labels.len();
                let scale = gy[0] / F::of(labels.len() as f64);
                acc(*logits, &mut |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == label { F::one() } else { F::zero() };
                            g[r * c + k] = g[r * c + k] + scale * (probs[r * c + k] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| {
                for v in g.iter_mut() {
                    *v = *v + gy[0];
                }
            }),
        }
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<Gradients<F>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, store);
        Ok(grads)
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to a leaf or parameter node.
    pub fn wrt(&self, graph: &Graph<F>, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(graph.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Adds every parameter-node gradient into the owning parameter's
    /// accumulator. Parameters used several times receive the sum.
    pub fn accumulate_into(&self, graph: &Graph<F>, store: &mut ParamStore<F>) {
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let p = store.get_mut(*id);
                match &mut p.grad {
                    Some(acc) => add_into(acc.data_mut(), g),
                    None => {
                        p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.clone()).expect("grad shape"))
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct MatmulPlan {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(mismatch());
        }
        let batch_dims = if ba.is_empty() { bb } else { ba };
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            batch: batch_dims.iter().product(),
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            m,
            k,
            n,
            out_shape,
        })
    }

    fn offsets(&self, t: usize) -> (usize, usize) {
        (
            if self.a_batched { t * self.m * self.k } else { 0 },
            if self.b_batched { t * self.k * self.n } else { 0 },
        )
    }
}

/// `out[m,n] += a[m,k] @ b[k,n]`
fn mm<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `da[m,k] += dc[m,n] @ b[k,n]^T`
fn mm_bt<F: Real>(dc: &[F], b: &[F], da: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (&x, &y) in drow.iter().zip(brow) {
                s = s + x * y;
            }
            da[i * k + p] = da[i * k + p] + s;
        }
    }
}

/// `db[k,n] += a[m,k]^T @ dc[m,n]`
fn mm_at<F: Real>(a: &[F], dc: &[F], db: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let dst = &mut db[p * n..(p + 1) * n];
            for (o, &d) in dst.iter_mut().zip(drow) {
                *o = *o + av * d;
            }
        }
    }
}

fn permute_swap<F: Real>(t: &Tensor<F>, i: usize, j: usize) -> Tensor<F> {
    let shape = t.shape();
    if i == j {
        return t.clone();
    }
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank - 1).rev() {
        in_strides[a] = in_strides[a + 1] * shape[a + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(i, j);
    let mut strides = in_strides.clone();
    strides.swap(i, j);
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    // Iterate output indices in row-major order; the innermost axis is copied
    // in a tight loop.
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(a, s)| a * s).sum();
        let step = strides[last];
        for q in 0..out_shape[last] {
            data.push(src[base + q * step]);
        }
        let mut a = last;
        loop {
            if a == 0 {
                return Tensor::new(out_shape, data).expect("permuted shape");
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}
