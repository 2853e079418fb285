//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! its operator (with whatever the backward pass needs cached), and the ids
//! of its inputs. [`Graph::backward`] walks the tape in reverse creation
//! order and accumulates gradients additively, so fan-out (one node feeding
//! several consumers) just works. Gradients live in a buffer parallel to the
//! tape; a node's gradient is only materialized when it requires one.

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_dims, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBcast {
        x: NodeId,
        y: NodeId,
    },
    Scale {
        x: NodeId,
        k: S,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<S>,
        rstd: Vec<S>,
    },
    Gelu {
        x: NodeId,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    SumAll {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Tensor<S>,
        targets: Tensor<S>,
    },
    StopGrad,
    GatherRows {
        x: NodeId,
        index: Vec<usize>,
    },
    GatherTokens {
        x: NodeId,
        index: Vec<Vec<usize>>,
    },
    ConcatTokens {
        parts: Vec<NodeId>,
        widths: Vec<usize>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    /// Gradient of the last `backward` call, if the node required one.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    /// Constant input.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: participates in `backward`.
    pub fn leaf_grad(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds `y` to `x`, broadcasting `y` across the leading dims of `x`.
    /// The dims of `y` must be a suffix of the dims of `x`.
    pub fn add_bcast(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (xd, yd) = (self.dims(x).to_vec(), self.dims(y).to_vec());
        if !xd.ends_with(&yd) {
            return Err(Error::shape(format!(
                "add_bcast: {yd:?} is not a suffix of {xd:?}"
            )));
        }
        let xv = self.value(x);
        let yv = self.value(y);
        let chunk = yv.len();
        let mut data = xv.data().to_vec();
        for part in data.chunks_mut(chunk) {
            for (d, &s) in part.iter_mut().zip(yv.data()) {
                *d += s;
            }
        }
        let value = Tensor::new(xd, data)?;
        let rg = self.any_requires(&[x, y]);
        Ok(self.push(value, Op::AddBcast { x, y }, rg))
    }

    pub fn scale(&mut self, x: NodeId, k: S) -> NodeId {
        let value = self.value(x).scale(k);
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale { x, k }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let value = self.value(x).permute(perm)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let r = self.dims(x).len();
        if r < 2 {
            return Err(Error::shape("transpose_last2 needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshape(dims)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Softmax along the last dimension. Rejects non-finite input.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(Error::numeric("softmax_rows: non-finite input"));
        }
        let last = *xv.dims().last().unwrap();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(last) {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(xv.dims().to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::SoftmaxRows { x }, rg))
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies the elementwise affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId> {
        let xv = self.value(x);
        let d = *xv.dims().last().unwrap();
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm affine params must have dims [{d}], got {:?} and {:?}",
                self.dims(gamma),
                self.dims(beta)
            )));
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(xv.len() / d);
        let mut out = vec![S::zero(); xv.len()];
        let inv_d = S::one() / S::cast(d as f64);
        for (row_i, row) in xhat.chunks_mut(d).enumerate() {
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * r;
                out[row_i * d + j] = gv[j] * *v + bv[j];
            }
        }
        let dims = xv.dims().to_vec();
        let xhat = Tensor::new(dims.clone(), xhat)?;
        let value = Tensor::new(dims, out)?;
        let rg = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu_value);
        let rg = self.requires_grad(x);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.value(x).mean_axis(axis)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::MeanAxis { x, axis }, rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(value, Op::SumAll { x }, rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = S::cast(self.value(x).len() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        let rg = self.requires_grad(x);
        self.push(value, Op::MeanAll { x }, rg)
    }

    /// Per-row cross entropy between logits and fixed target distributions.
    /// Targets are plain values, never differentiated. Output dims: [b].
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &Tensor<S>) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || targets.dims() != lv.dims() {
            return Err(Error::shape(format!(
                "cross_entropy expects matching [b, c] logits and targets, got {:?} and {:?}",
                lv.dims(),
                targets.dims()
            )));
        }
        let (b, c) = (lv.dims()[0], lv.dims()[1]);
        let mut probs = vec![S::zero(); b * c];
        let mut losses = Vec::with_capacity(b);
        for i in 0..b {
            let row = &lv.data()[i * c..(i + 1) * c];
            let trow = &targets.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for &v in row {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            let mut loss = S::zero();
            let mut tsum = S::zero();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
                loss += trow[j] * (lse - row[j]);
                tsum += trow[j];
            }
            let _ = tsum;
            losses.push(loss);
        }
        let probs = Tensor::new(vec![b, c], probs)?;
        let value = Tensor::new(vec![b], losses)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// Identity in value, barrier in gradient: nothing flows upstream.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Selects rows along axis 0; indices may repeat. Gradients scatter-add
    /// back, so a row gathered twice accumulates both contributions.
    pub fn gather_rows(&mut self, x: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).gather_rows(&index)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::GatherRows { x, index }, rg))
    }

    /// Per-instance token selection on a [b, n, d] tensor: output row `i`
    /// holds the tokens `index[i]` of instance `i`, in the given order.
    pub fn gather_tokens(&mut self, x: NodeId, index: Vec<Vec<usize>>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::shape(format!(
                "gather_tokens expects [b, n, d], got {:?}",
                xv.dims()
            )));
        }
        let (b, n, d) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        if index.len() != b {
            return Err(Error::usage(format!(
                "gather_tokens got {} index rows for batch {b}",
                index.len()
            )));
        }
        let k = index.first().map_or(0, Vec::len);
        if k == 0 || index.iter().any(|r| r.len() != k) {
            return Err(Error::usage(
                "gather_tokens needs equal, non-empty index rows",
            ));
        }
        if let Some(&bad) = index.iter().flatten().find(|&&t| t >= n) {
            return Err(Error::usage(format!(
                "gather_tokens index {bad} out of range for {n} tokens"
            )));
        }
        let mut data = Vec::with_capacity(b * k * d);
        for (i, row) in index.iter().enumerate() {
            for &t in row {
                let base = (i * n + t) * d;
                data.extend_from_slice(&xv.data()[base..base + d]);
            }
        }
        let value = Tensor::new(vec![b, k, d], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::GatherTokens { x, index }, rg))
    }

    /// Concatenates [b, m_i, d] parts along the token axis.
    pub fn concat_tokens(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_axis1(&tensors)?;
        let widths = parts.iter().map(|&p| self.dims(p)[1]).collect();
        let rg = self.any_requires(parts);
        Ok(self.push(
            value,
            Op::ConcatTokens {
                parts: parts.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    /// `loss` must be a scalar (one element).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            self.grads[i] = if node.requires_grad {
                Some(Tensor::zeros(node.value.dims().to_vec()))
            } else {
                None
            };
        }
        if let Some(g) = self.grads[loss.0].as_mut() {
            g.data_mut()[0] = S::one();
        } else {
            return Ok(());
        }

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let g = hi[0].as_ref().expect("checked above");
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::Add(a, b) => {
                    if let Some(ga) = lo[a.0].as_mut() {
                        add_into(ga.data_mut(), g.data());
                    }
                    if let Some(gb) = lo[b.0].as_mut() {
                        add_into(gb.data_mut(), g.data());
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(ga) = lo[a.0].as_mut() {
                        let bv = self.nodes[b.0].value.data();
                        for ((d, &gv), &v) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                            *d += gv * v;
                        }
                    }
                    if let Some(gb) = lo[b.0].as_mut() {
                        let av = self.nodes[a.0].value.data();
                        for ((d, &gv), &v) in gb.data_mut().iter_mut().zip(g.data()).zip(av) {
                            *d += gv * v;
                        }
                    }
                }
                Op::AddBcast { x, y } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        add_into(gx.data_mut(), g.data());
                    }
                    if let Some(gy) = lo[y.0].as_mut() {
                        let chunk = gy.len();
                        for part in g.data().chunks(chunk) {
                            add_into(gy.data_mut(), part);
                        }
                    }
                }
                Op::Scale { x, k } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        for (d, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                            *d += gv * *k;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let spec = matmul_dims(self.nodes[a.0].value.dims(), self.nodes[b.0].value.dims())
                        .expect("validated at construction");
                    if let Some(ga) = lo[a.0].as_mut() {
                        let bv = self.nodes[b.0].value.data();
                        matmul_grad_lhs(&spec, g.data(), bv, ga.data_mut());
                    }
                    if let Some(gb) = lo[b.0].as_mut() {
                        let av = self.nodes[a.0].value.data();
                        matmul_grad_rhs(&spec, av, g.data(), gb.data_mut());
                    }
                }
                Op::Permute { x, perm } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        let mut inv = vec![0usize; perm.len()];
                        for (i, &p) in perm.iter().enumerate() {
                            inv[p] = i;
                        }
                        let back = g.permute(&inv).expect("inverse permutation is valid");
                        add_into(gx.data_mut(), back.data());
                    }
                }
                Op::Reshape { x } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        add_into(gx.data_mut(), g.data());
                    }
                }
                Op::SoftmaxRows { x } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        let y = node.value.data();
                        let last = *node.value.dims().last().unwrap();
                        let gxd = gx.data_mut();
                        for r in 0..y.len() / last {
                            let base = r * last;
                            let mut dot = S::zero();
                            for j in 0..last {
                                dot += g.data()[base + j] * y[base + j];
                            }
                            for j in 0..last {
                                gxd[base + j] += y[base + j] * (g.data()[base + j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = *node.value.dims().last().unwrap();
                    let gv = self.nodes[gamma.0].value.data();
                    let inv_d = S::one() / S::cast(d as f64);
                    if let Some(gx) = lo[x.0].as_mut() {
                        let gxd = gx.data_mut();
                        for (r, &rs) in rstd.iter().enumerate() {
                            let base = r * d;
                            let mut mean_dxhat = S::zero();
                            let mut mean_dxhat_xhat = S::zero();
                            for j in 0..d {
                                let dxh = g.data()[base + j] * gv[j];
                                mean_dxhat += dxh;
                                mean_dxhat_xhat += dxh * xhat.data()[base + j];
                            }
                            mean_dxhat *= inv_d;
                            mean_dxhat_xhat *= inv_d;
                            for j in 0..d {
                                let dxh = g.data()[base + j] * gv[j];
                                gxd[base + j] += rs
                                    * (dxh - mean_dxhat - xhat.data()[base + j] * mean_dxhat_xhat);
                            }
                        }
                    }
                    if let Some(gg) = lo[gamma.0].as_mut() {
                        let ggd = gg.data_mut();
                        for (row, grow) in xhat.data().chunks(d).zip(g.data().chunks(d)) {
                            for j in 0..d {
                                ggd[j] += grow[j] * row[j];
                            }
                        }
                    }
                    if let Some(gb) = lo[beta.0].as_mut() {
                        let gbd = gb.data_mut();
                        for grow in g.data().chunks(d) {
                            for j in 0..d {
                                gbd[j] += grow[j];
                            }
                        }
                    }
                }
                Op::Gelu { x } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        let xv = self.nodes[x.0].value.data();
                        for ((d, &gv), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                            *d += gv * gelu_derivative(v);
                        }
                    }
                }
                Op::MeanAxis { x, axis } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        let xd = self.nodes[x.0].value.dims();
                        let outer: usize = xd[..*axis].iter().product();
                        let n = xd[*axis];
                        let inner: usize = xd[*axis + 1..].iter().product();
                        let inv = S::one() / S::cast(n as f64);
                        let gxd = gx.data_mut();
                        for o in 0..outer {
                            for k in 0..n {
                                let base = (o * n + k) * inner;
                                for j in 0..inner {
                                    gxd[base + j] += g.data()[o * inner + j] * inv;
                                }
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        let gv = g.data()[0];
                        for d in gx.data_mut() {
                            *d += gv;
                        }
                    }
                }
                Op::MeanAll { x } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        let gv = g.data()[0] / S::cast(gx.len() as f64);
                        for d in gx.data_mut() {
                            *d += gv;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                } => {
                    if let Some(gl) = lo[logits.0].as_mut() {
                        let c = probs.dims()[1];
                        let gld = gl.data_mut();
                        for (i, &gv) in g.data().iter().enumerate() {
                            let mut tsum = S::zero();
                            for j in 0..c {
                                tsum += targets.data()[i * c + j];
                            }
                            for j in 0..c {
                                gld[i * c + j] +=
                                    gv * (probs.data()[i * c + j] * tsum - targets.data()[i * c + j]);
                            }
                        }
                    }
                }
                Op::GatherRows { x, index } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        let row: usize = self.nodes[x.0].value.dims()[1..].iter().product();
                        let gxd = gx.data_mut();
                        for (out_i, &src) in index.iter().enumerate() {
                            let grow = &g.data()[out_i * row..(out_i + 1) * row];
                            add_into(&mut gxd[src * row..(src + 1) * row], grow);
                        }
                    }
                }
                Op::GatherTokens { x, index } => {
                    if let Some(gx) = lo[x.0].as_mut() {
                        let xd = self.nodes[x.0].value.dims();
                        let (n, d) = (xd[1], xd[2]);
                        let k = index[0].len();
                        let gxd = gx.data_mut();
                        for (i, row) in index.iter().enumerate() {
                            for (j, &t) in row.iter().enumerate() {
                                let gbase = (i * k + j) * d;
                                let xbase = (i * n + t) * d;
                                add_into(
                                    &mut gxd[xbase..xbase + d],
                                    &g.data()[gbase..gbase + d],
                                );
                            }
                        }
                    }
                }
                Op::ConcatTokens { parts, widths } => {
                    let d = *node.value.dims().last().unwrap();
                    let b = node.value.dims()[0];
                    let total: usize = widths.iter().sum();
                    for i in 0..b {
                        let mut off = 0;
                        for (part, &w) in parts.iter().zip(widths) {
                            if let Some(gp) = lo[part.0].as_mut() {
                                let gbase = (i * total + off) * d;
                                let pbase = i * w * d;
                                add_into(
                                    &mut gp.data_mut()[pbase..pbase + w * d],
                                    &g.data()[gbase..gbase + w * d],
                                );
                            }
                            off += w;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// dA += G @ B^T, accumulated across batches when A is shared.
fn matmul_grad_lhs<S: Scalar>(
    spec: &crate::numerics::tensor::MatmulSpec,
    g: &[S],
    b: &[S],
    ga: &mut [S],
) {
    let (m, k, p) = (spec.m, spec.k, spec.p);
    for batch in 0..spec.batches {
        let g_base = batch * m * p;
        let b_base = if spec.rhs_batched { batch * k * p } else { 0 };
        let a_base = if spec.lhs_batched { batch * m * k } else { 0 };
        for i in 0..m {
            for kk in 0..k {
                let mut acc = S::zero();
                let grow = &g[g_base + i * p..g_base + (i + 1) * p];
                let brow = &b[b_base + kk * p..b_base + (kk + 1) * p];
                for (&gv, &bv) in grow.iter().zip(brow) {
                    acc += gv * bv;
                }
                ga[a_base + i * k + kk] += acc;
            }
        }
    }
}

/// dB += A^T @ G, accumulated across batches when B is shared.
fn matmul_grad_rhs<S: Scalar>(
    spec: &crate::numerics::tensor::MatmulSpec,
    a: &[S],
    g: &[S],
    gb: &mut [S],
) {
    let (m, k, p) = (spec.m, spec.k, spec.p);
    for batch in 0..spec.batches {
        let g_base = batch * m * p;
        let a_base = if spec.lhs_batched { batch * m * k } else { 0 };
        let b_base = if spec.rhs_batched { batch * k * p } else { 0 };
        for i in 0..m {
            for kk in 0..k {
                let av = a[a_base + i * k + kk];
                let grow = &g[g_base + i * p..g_base + (i + 1) * p];
                let brow = &mut gb[b_base + kk * p..b_base + (kk + 1) * p];
                for (o, &gv) in brow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}

fn gelu_value<S: Scalar>(x: S) -> S {
    let c = S::cast(0.797884560802865355);
    let a = S::cast(0.044715);
    let half = S::cast(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::cast(0.797884560802865355);
    let a = S::cast(0.044715);
    let half = S::cast(0.5);
    let three = S::cast(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![0.0f64; 3]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![1000.0f64, 0.0, 0.0]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(close(v[0], 1.0, 1e-12));
        assert!(close(v[1] + v[2], 0.0, 1e-12));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        let expect = [(1.0f64).exp() / z, (2.0f64).exp() / z, (3.0f64).exp() / z];
        for (a, e) in g.value(y).data().iter().zip(expect) {
            assert!(close(*a, e, 1e-12));
        }
    }

    #[test]
    fn layer_norm_zeroes_constant_rows() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 4], vec![5.0f64; 4]).unwrap());
        let gamma = g.leaf(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let beta = g.leaf(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for &v in g.value(y).data() {
            assert!(close(v, 0.0, 1e-6));
        }
    }

    #[test]
    fn layer_norm_unit_pair() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0f64, -1.0]).unwrap());
        let gamma = g.leaf(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let beta = g.leaf(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!(close(g.value(y).data()[0], 1.0, 1e-6));
        assert!(close(g.value(y).data()[1], -1.0, 1e-6));
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let mut g = Graph::new();
        let confident = g.leaf(Tensor::new(vec![1, 2], vec![1000.0f64, 0.0]).unwrap());
        let t = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let ce = g.cross_entropy(confident, &t).unwrap();
        assert!(g.value(ce).data()[0].abs() < 1e-9);

        let uniform = g.leaf(Tensor::zeros(vec![1, 5]));
        let t5 = Tensor::new(vec![1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let ce5 = g.cross_entropy(uniform, &t5).unwrap();
        assert!(close(g.value(ce5).data()[0], (5.0f64).ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_soft_targets() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 2], vec![0.2f64, -0.4]).unwrap());
        let t = Tensor::new(vec![1, 2], vec![0.7, 0.3]).unwrap();
        let ce = g.cross_entropy(logits, &t).unwrap();
        let z: f64 = (0.2f64).exp() + (-0.4f64).exp();
        let expect = 0.7 * (z.ln() - 0.2) + 0.3 * (z.ln() + 0.4);
        assert!(close(g.value(ce).data()[0], expect, 1e-12));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf_grad(Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fanout_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf_grad(Tensor::scalar(3.0f64));
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert!(close(g.grad(x).unwrap().data()[0], 6.0, 1e-12));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = g.leaf_grad(Tensor::scalar(3.0f64));
        let frozen = g.stop_gradient(x);
        let y = g.mul(frozen, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert!(close(g.grad(x).unwrap().data()[0], 3.0, 1e-12));
        assert_eq!(g.value(frozen).data(), g.value(x).data());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf_grad(Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut g = Graph::new();
        let x = g.leaf_grad(Tensor::new(vec![2, 2], vec![0.3f64, -0.7, 1.1, 0.4]).unwrap());
        let sm = g.softmax_rows(x).unwrap();
        let s = g.sum_all(sm);
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().data().to_vec();
        g.backward(s).unwrap();
        assert_eq!(first, g.grad(x).unwrap().data());
    }

    /// Central-difference check of a scalar-valued graph builder.
    fn fd_check(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    ) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf_grad(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| g.grad(id).unwrap().data().to_vec())
            .collect();

        let h = 1e-5;
        for (which, input) in inputs.iter().enumerate() {
            for e in 0..input.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let ids2: Vec<NodeId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == which {
                                t.data_mut()[e] += delta;
                            }
                            g2.leaf_grad(t)
                        })
                        .collect();
                    let l = build(&mut g2, &ids2);
                    g2.value(l).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let ad = grads[which][e];
                let denom = fd.abs().max(ad.abs()).max(1.0);
                assert!(
                    (fd - ad).abs() / denom < 1e-6,
                    "input {which} element {e}: fd={fd} ad={ad}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = Tensor::new(vec![2, 3], vec![0.1f64, -0.2, 0.3, 0.7, 0.5, -0.6]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![0.4f64, 0.9, -0.3, 0.2, 0.8, -0.5]).unwrap();
        fd_check(&[a, b], |g, ids| {
            let y = g.matmul(ids[0], ids[1]).unwrap();
            g.sum_all(y)
        });
    }

    #[test]
    fn batched_matmul_gradient_with_shared_rhs() {
        let a = Tensor::new(vec![2, 2, 2], vec![0.1f64, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8])
            .unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.9f64, -0.1, 0.3, 0.5]).unwrap();
        fd_check(&[a, b], |g, ids| {
            let y = g.matmul(ids[0], ids[1]).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum_all(sq)
        });
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::new(vec![2, 3], vec![0.5f64, -0.2, 0.1, 1.2, 0.3, -0.7]).unwrap();
        let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.2, 0.5, 0.3]).unwrap();
        fd_check(&[logits], move |g, ids| {
            let ce = g.cross_entropy(ids[0], &targets).unwrap();
            g.mean_all(ce)
        });
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = Tensor::new(vec![2, 4], vec![0.3f64, -0.9, 0.5, 1.4, -0.2, 0.8, 0.1, -1.1])
            .unwrap();
        let gamma = Tensor::new(vec![4], vec![1.1f64, 0.9, -0.4, 0.7]).unwrap();
        let beta = Tensor::new(vec![4], vec![0.05f64, -0.2, 0.3, 0.0]).unwrap();
        fd_check(&[x, gamma, beta], |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum_all(sq)
        });
    }

    #[test]
    fn gelu_softmax_chain_gradient_matches_finite_differences() {
        let x = Tensor::new(vec![2, 3], vec![0.4f64, -1.2, 0.9, 0.0, 2.1, -0.5]).unwrap();
        fd_check(&[x], |g, ids| {
            let h = g.gelu(ids[0]);
            let sm = g.softmax_rows(h).unwrap();
            let sq = g.mul(sm, sm).unwrap();
            g.sum_all(sq)
        });
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let x = Tensor::new(
            vec![2, 3, 2],
            vec![
                0.1f64, -0.4, 0.7, 0.2, -0.9, 0.3, 0.8, -0.1, 0.5, 0.6, -0.3, 0.4,
            ],
        )
        .unwrap();
        fd_check(&[x.clone()], |g, ids| {
            let p = g.permute(ids[0], &[1, 0, 2]).unwrap();
            let r = g.reshape(p, vec![6, 2]).unwrap();
            let gathered = g.gather_rows(r, vec![0, 2, 2, 5]).unwrap();
            let sq = g.mul(gathered, gathered).unwrap();
            g.sum_all(sq)
        });

        fd_check(&[x.clone()], |g, ids| {
            let picked = g
                .gather_tokens(ids[0], vec![vec![0, 2], vec![1, 1]])
                .unwrap();
            let sq = g.mul(picked, picked).unwrap();
            g.sum_all(sq)
        });

        fd_check(&[x], |g, ids| {
            let both = g.concat_tokens(&[ids[0], ids[0]]).unwrap();
            let sq = g.mul(both, both).unwrap();
            g.sum_all(sq)
        });
    }

    #[test]
    fn reduction_and_broadcast_gradients_match_finite_differences() {
        let x = Tensor::new(vec![2, 2, 3], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect())
            .unwrap();
        let bias = Tensor::new(vec![3], vec![0.3f64, -0.2, 0.6]).unwrap();
        fd_check(&[x, bias], |g, ids| {
            let y = g.add_bcast(ids[0], ids[1]).unwrap();
            let m = g.mean_axis(y, 1).unwrap();
            let sq = g.mul(m, m).unwrap();
            let s = g.mean_all(sq);
            g.scale(s, 2.5)
        });
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let mut g = Graph::new();
        let x = g.leaf_grad(Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap());
        let picked = g.gather_rows(x, vec![0, 0, 1]).unwrap();
        let s = g.sum_all(picked);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
