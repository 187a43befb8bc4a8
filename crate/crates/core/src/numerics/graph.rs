//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so every node's inputs have
//! smaller ids than the node itself and walking the tape backwards is a
//! valid reverse topological order. Each node is visited at most once per
//! backward pass. Gradients are only computed for nodes that depend on a
//! leaf created with [`Graph::param`].

use super::pool::{argmax_first, kmax_into};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2dSame {
        input: NodeId,
        kernels: NodeId,
    },
    MaxOverFilters {
        input: NodeId,
        argmax: Vec<usize>,
    },
    KMaxRows {
        input: NodeId,
        positions: Vec<Option<usize>>,
    },
    Gather {
        source: NodeId,
        positions: Vec<Option<usize>>,
    },
    ConcatCols {
        inputs: Vec<NodeId>,
    },
    PermuteRows {
        input: NodeId,
        perm: Vec<usize>,
    },
    Reshape {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        activation: Activation,
    },
    PairwiseCe {
        pos: NodeId,
        neg: NodeId,
    },
    PairwiseMargin {
        pos: NodeId,
        neg: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A single computation graph. Graphs share no state, so independent graphs
/// can be built and differentiated on different threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, or `None` if backward never reached the node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Zero-padded "same" 2-D convolution of an `[h, w]` input with
    /// `[g, g, f]` kernels, producing `[h, w, f]`. Output cell `(i, j)` sums
    /// input taps `(i + a - g/2, j + b - g/2)` for `a, b < g`.
    pub fn conv2d_same(&mut self, input: NodeId, kernels: NodeId) -> Result<NodeId> {
        let (x, k) = (self.value(input), self.value(kernels));
        let &[h, w] = x.shape() else {
            return Err(Error::shape(
                "conv2d_same",
                format!("input must be 2-D, got {:?}", x.shape()),
            ));
        };
        let &[g, g2, f] = k.shape() else {
            return Err(Error::shape(
                "conv2d_same",
                format!("kernels must be [g, g, filters], got {:?}", k.shape()),
            ));
        };
        if g != g2 {
            return Err(Error::shape(
                "conv2d_same",
                format!("kernel height {g} differs from kernel width {g2}"),
            ));
        }
        if g < 2 || f == 0 {
            return Err(Error::shape(
                "conv2d_same",
                format!("kernel size must be >= 2 and filters >= 1, got g={g}, filters={f}"),
            ));
        }
        let (x, k) = (x.data(), k.data());
        let off = g / 2;
        let mut out = vec![0.0; h * w * f];
        for i in 0..h {
            for j in 0..w {
                let cell = &mut out[(i * w + j) * f..(i * w + j + 1) * f];
                for a in 0..g {
                    let Some(ii) = (i + a).checked_sub(off).filter(|&r| r < h) else {
                        continue;
                    };
                    for b in 0..g {
                        let Some(jj) = (j + b).checked_sub(off).filter(|&c| c < w) else {
                            continue;
                        };
                        let tap = x[ii * w + jj];
                        let kern = &k[(a * g + b) * f..(a * g + b + 1) * f];
                        for (o, kv) in cell.iter_mut().zip(kern) {
                            *o += tap * kv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![h, w, f], out)?;
        let rg = self.needs(&[input, kernels]);
        Ok(self.push(value, Op::Conv2dSame { input, kernels }, rg))
    }

    /// Maximum over the trailing filter axis: `[h, w, f] -> [h, w]`.
    pub fn max_over_filters(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let &[h, w, f] = x.shape() else {
            return Err(Error::shape(
                "max_over_filters",
                format!("input must be [h, w, filters], got {:?}", x.shape()),
            ));
        };
        if f == 0 {
            return Err(Error::shape("max_over_filters", "filter axis is empty"));
        }
        let mut out = Vec::with_capacity(h * w);
        let mut argmax = Vec::with_capacity(h * w);
        for cell in x.data().chunks_exact(f) {
            let best = argmax_first(cell);
            argmax.push(best);
            out.push(cell[best]);
        }
        let value = Tensor::new(vec![h, w], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MaxOverFilters { input, argmax }, rg))
    }

    /// Row-wise k-max pooling restricted to the first `prefix` columns of an
    /// `[r, c]` matrix (a 1-D input is one row). Returns the `[r, k]` node and
    /// the source column of every pooled value (`None` for padding).
    pub fn kmax_rows(
        &mut self,
        input: NodeId,
        k: usize,
        prefix: usize,
    ) -> Result<(NodeId, Vec<Option<usize>>)> {
        if k == 0 {
            return Err(Error::Config("k-max pooling needs k >= 1".into()));
        }
        let x = self.value(input);
        if x.shape().len() > 2 {
            return Err(Error::shape(
                "kmax_rows",
                format!("input must be 1-D or 2-D, got {:?}", x.shape()),
            ));
        }
        let (rows, cols) = x.as_matrix_dims();
        if prefix > cols {
            return Err(Error::shape(
                "kmax_rows",
                format!("prefix {prefix} exceeds row length {cols}"),
            ));
        }
        let mut values = Vec::with_capacity(rows * k);
        let mut positions = Vec::with_capacity(rows * k);
        for r in 0..rows {
            kmax_into(&x.row(r)[..prefix], k, &mut values, &mut positions);
        }
        let shape = if x.shape().len() == 1 {
            vec![k]
        } else {
            vec![rows, k]
        };
        let value = Tensor::new(shape, values)?;
        let rg = self.needs(&[input]);
        let id = self.push(
            value,
            Op::KMaxRows {
                input,
                positions: positions.clone(),
            },
            rg,
        );
        Ok((id, positions))
    }

    /// Looks up `source[p]` for every position (`None` yields 0). The output
    /// has `shape`, whose element count must equal `positions.len()`.
    pub fn gather(
        &mut self,
        source: NodeId,
        positions: &[Option<usize>],
        shape: &[usize],
    ) -> Result<NodeId> {
        let src = self.value(source).data();
        let mut out = Vec::with_capacity(positions.len());
        for p in positions {
            out.push(match *p {
                Some(p) if p < src.len() => src[p],
                Some(p) => {
                    return Err(Error::shape(
                        "gather",
                        format!("position {p} outside source of length {}", src.len()),
                    ))
                }
                None => 0.0,
            });
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.needs(&[source]);
        Ok(self.push(
            value,
            Op::Gather {
                source,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates `[r, c_i]` matrices along columns.
    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let Some(first) = inputs.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let rows = self.value(*first).as_matrix_dims().0;
        let mut widths = Vec::with_capacity(inputs.len());
        for id in inputs {
            let t = self.value(*id);
            let (r, c) = t.as_matrix_dims();
            if t.shape().len() != 2 || r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("expected [{rows}, _] inputs, got {:?}", t.shape()),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for id in inputs {
                out.extend_from_slice(self.value(*id).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let rg = self.needs(inputs);
        Ok(self.push(
            value,
            Op::ConcatCols {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// `output[i] = input[perm[i]]` over the rows of an `[r, c]` matrix.
    pub fn permute_rows(&mut self, input: NodeId, perm: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        let (rows, _) = x.as_matrix_dims();
        if x.shape().len() != 2 {
            return Err(Error::shape(
                "permute_rows",
                format!("input must be 2-D, got {:?}", x.shape()),
            ));
        }
        check_permutation(perm, rows)?;
        let mut out = Vec::with_capacity(x.len());
        for &src in perm {
            out.extend_from_slice(x.row(src));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(
            value,
            Op::PermuteRows {
                input,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// `activation(input · weights + bias)` for a 1-D input of length `m`,
    /// `[m, n]` weights and `[n]` bias.
    pub fn dense(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        activation: Activation,
    ) -> Result<NodeId> {
        let (x, wt, b) = (self.value(input), self.value(weights), self.value(bias));
        let &[m, n] = wt.shape() else {
            return Err(Error::shape(
                "dense",
                format!("weights must be 2-D, got {:?}", wt.shape()),
            ));
        };
        if x.shape() != [m] {
            return Err(Error::shape(
                "dense",
                format!("input {:?} does not match weights {:?}", x.shape(), wt.shape()),
            ));
        }
        if b.shape() != [n] {
            return Err(Error::shape(
                "dense",
                format!("bias {:?} does not match weights {:?}", b.shape(), wt.shape()),
            ));
        }
        let mut out = vec![0.0; n];
        for (xi, wrow) in x.data().iter().zip(wt.data().chunks_exact(n)) {
            for (o, w) in out.iter_mut().zip(wrow) {
                *o += xi * w;
            }
        }
        for (o, bj) in out.iter_mut().zip(b.data()) {
            *o += bj;
            if activation == Activation::Relu && *o < 0.0 {
                *o = 0.0;
            }
        }
        let rg = self.needs(&[input, weights, bias]);
        Ok(self.push(
            Tensor::vector(out),
            Op::Dense {
                input,
                weights,
                bias,
                activation,
            },
            rg,
        ))
    }

    /// Pairwise softmax cross-entropy over two one-element scores.
    pub fn pairwise_ce_loss(&mut self, pos: NodeId, neg: NodeId) -> Result<NodeId> {
        let (a, b) = self.scalar_pair("pairwise_ce_loss", pos, neg)?;
        let rg = self.needs(&[pos, neg]);
        Ok(self.push(
            Tensor::scalar(pairwise_ce_loss(a, b)),
            Op::PairwiseCe { pos, neg },
            rg,
        ))
    }

    /// Hinge loss `max(0, 1 - pos + neg)` over two one-element scores.
    pub fn pairwise_margin_loss(&mut self, pos: NodeId, neg: NodeId) -> Result<NodeId> {
        let (a, b) = self.scalar_pair("pairwise_margin_loss", pos, neg)?;
        let rg = self.needs(&[pos, neg]);
        Ok(self.push(
            Tensor::scalar(pairwise_margin_loss(a, b)),
            Op::PairwiseMargin { pos, neg },
            rg,
        ))
    }

    fn scalar_pair(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(f64, f64)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != 1 || tb.len() != 1 {
            return Err(Error::shape(
                op,
                format!("expected scalars, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        Ok((ta.item(), tb.item()))
    }

    /// Back-propagates from a one-element node, seeding its gradient with 1.
    /// Gradients from earlier calls are discarded.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be a scalar, got {:?}", out.shape()),
            ));
        }
        let seed = Tensor::new(out.shape().to_vec(), vec![1.0])?;
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[output.0].grad = Some(seed);

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &grad);
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, grad: &Tensor) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        self.propagate_op(idx, &op, grad.data());
        self.nodes[idx].op = op;
    }

    fn propagate_op(&mut self, idx: usize, op: &Op, dy: &[f64]) {
        match op {
            Op::Leaf => {}
            &Op::Conv2dSame { input, kernels } => {
                let (x, k) = (self.value(input), self.value(kernels));
                let (h, w) = (x.shape()[0], x.shape()[1]);
                let (g, f) = (k.shape()[0], k.shape()[2]);
                let off = g / 2;
                let want_x = self.wants(input);
                let want_k = self.wants(kernels);
                let mut dx = vec![0.0; if want_x { h * w } else { 0 }];
                let mut dk = vec![0.0; if want_k { g * g * f } else { 0 }];
                let (xd, kd) = (x.data(), k.data());
                for i in 0..h {
                    for j in 0..w {
                        let dcell = &dy[(i * w + j) * f..(i * w + j + 1) * f];
                        for a in 0..g {
                            let Some(ii) = (i + a).checked_sub(off).filter(|&r| r < h) else {
                                continue;
                            };
                            for b in 0..g {
                                let Some(jj) = (j + b).checked_sub(off).filter(|&c| c < w)
                                else {
                                    continue;
                                };
                                let base = (a * g + b) * f;
                                if want_k {
                                    let tap = xd[ii * w + jj];
                                    for (dkv, d) in dk[base..base + f].iter_mut().zip(dcell) {
                                        *dkv += tap * d;
                                    }
                                }
                                if want_x {
                                    let s: f64 = kd[base..base + f]
                                        .iter()
                                        .zip(dcell)
                                        .map(|(kv, d)| kv * d)
                                        .sum();
                                    dx[ii * w + jj] += s;
                                }
                            }
                        }
                    }
                }
                if want_x {
                    let t = Tensor::new(vec![h, w], dx).expect("conv input grad shape");
                    self.accumulate(input, t);
                }
                if want_k {
                    let t = Tensor::new(vec![g, g, f], dk).expect("conv kernel grad shape");
                    self.accumulate(kernels, t);
                }
            }
            Op::MaxOverFilters { input, argmax } => {
                let input = *input;
                let x = self.value(input);
                let f = x.shape()[2];
                let mut dx = vec![0.0; x.len()];
                for (cell, (&best, &d)) in argmax.iter().zip(dy).enumerate() {
                    dx[cell * f + best] += d;
                }
                let t = Tensor::new(x.shape().to_vec(), dx).expect("max grad shape");
                self.accumulate(input, t);
            }
            Op::KMaxRows { input, positions } => {
                let input = *input;
                let x = self.value(input);
                let (rows, cols) = x.as_matrix_dims();
                let k = positions.len() / rows.max(1);
                let mut dx = vec![0.0; x.len()];
                for (slot, (p, &d)) in positions.iter().zip(dy).enumerate() {
                    if let Some(p) = p {
                        dx[(slot / k) * cols + p] += d;
                    }
                }
                let t = Tensor::new(x.shape().to_vec(), dx).expect("kmax grad shape");
                self.accumulate(input, t);
            }
            Op::Gather { source, positions } => {
                let source = *source;
                let src = self.value(source);
                let mut ds = vec![0.0; src.len()];
                for (p, &d) in positions.iter().zip(dy) {
                    if let Some(p) = p {
                        ds[*p] += d;
                    }
                }
                let t = Tensor::new(src.shape().to_vec(), ds).expect("gather grad shape");
                self.accumulate(source, t);
            }
            Op::ConcatCols { inputs } => {
                let widths: Vec<usize> = inputs
                    .iter()
                    .map(|id| self.value(*id).as_matrix_dims().1)
                    .collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (id, width) in inputs.iter().zip(&widths) {
                    if self.wants(*id) {
                        let part = self.value(*id);
                        let rows = part.as_matrix_dims().0;
                        let mut d = Vec::with_capacity(part.len());
                        for r in 0..rows {
                            d.extend_from_slice(&dy[r * total + offset..r * total + offset + width]);
                        }
                        let t = Tensor::new(part.shape().to_vec(), d).expect("concat grad shape");
                        self.accumulate(*id, t);
                    }
                    offset += width;
                }
            }
            Op::PermuteRows { input, perm } => {
                let input = *input;
                let x = self.value(input);
                let cols = x.as_matrix_dims().1;
                let mut dx = vec![0.0; x.len()];
                for (dst, &src) in perm.iter().enumerate() {
                    dx[src * cols..(src + 1) * cols]
                        .copy_from_slice(&dy[dst * cols..(dst + 1) * cols]);
                }
                let t = Tensor::new(x.shape().to_vec(), dx).expect("permute grad shape");
                self.accumulate(input, t);
            }
            &Op::Reshape { input } => {
                let shape = self.value(input).shape().to_vec();
                let t = Tensor::new(shape, dy.to_vec()).expect("reshape grad shape");
                self.accumulate(input, t);
            }
            &Op::Dense {
                input,
                weights,
                bias,
                activation,
            } => {
                let out = self.nodes[idx].value.data();
                let dz: Vec<f64> = match activation {
                    Activation::Identity => dy.to_vec(),
                    Activation::Relu => dy
                        .iter()
                        .zip(out)
                        .map(|(&d, &o)| if o > 0.0 { d } else { 0.0 })
                        .collect(),
                };
                let x = self.value(input).data().to_vec();
                let wt = self.value(weights);
                let n = wt.shape()[1];
                if self.wants(input) {
                    let dx: Vec<f64> = wt
                        .data()
                        .chunks_exact(n)
                        .map(|wrow| wrow.iter().zip(&dz).map(|(w, d)| w * d).sum())
                        .collect();
                    self.accumulate(input, Tensor::vector(dx));
                }
                if self.wants(weights) {
                    let mut dw = Vec::with_capacity(x.len() * n);
                    for xi in &x {
                        dw.extend(dz.iter().map(|d| xi * d));
                    }
                    let t = Tensor::new(vec![x.len(), n], dw).expect("dense grad shape");
                    self.accumulate(weights, t);
                }
                self.accumulate(bias, Tensor::vector(dz));
            }
            &Op::PairwiseCe { pos, neg } => {
                let d = dy[0];
                let (a, b) = (self.value(pos).item(), self.value(neg).item());
                // d/da = -(1 - p) = -sigmoid(b - a); d/db = sigmoid(b - a).
                let s = sigmoid(b - a);
                self.accumulate(pos, Tensor::scalar(-s * d));
                self.accumulate(neg, Tensor::scalar(s * d));
            }
            &Op::PairwiseMargin { pos, neg } => {
                let d = dy[0];
                let (a, b) = (self.value(pos).item(), self.value(neg).item());
                let active = 1.0 - a + b > 0.0;
                let g = if active { d } else { 0.0 };
                self.accumulate(pos, Tensor::scalar(-g));
                self.accumulate(neg, Tensor::scalar(g));
            }
        }
    }
}

/// Rejects anything that is not a bijection on `0..n`.
pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Config(format!(
            "permutation has {} entries, expected {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Config(format!(
                "{perm:?} is not a permutation of 0..{n}"
            )));
        }
    }
    Ok(())
}

/// Inverse of a permutation: `inverse[perm[i]] == i`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln(e^pos / (e^pos + e^neg))`, evaluated without overflow.
pub fn pairwise_ce_loss(pos: f64, neg: f64) -> f64 {
    let m = pos.max(neg);
    (m - pos) + ((pos - m).exp() + (neg - m).exp()).ln()
}

/// `max(0, 1 - pos + neg)`.
pub fn pairwise_margin_loss(pos: f64, neg: f64) -> f64 {
    (1.0 - pos + neg).max(0.0)
}
