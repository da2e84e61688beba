//! Minimal reverse-mode tape over [`Tensor`].
//!
//! The op set is exactly what a two-layer transformer encoder with masked
//! attention, batch/layer norm, and MSE/cross-entropy heads needs — this is
//! not a general autodiff system. Nodes compute eagerly on construction;
//! [`Tape::backward`] walks the tape in reverse and returns per-node
//! gradients. Leaf nodes may be bound to a [`ParamId`], in which case
//! [`Tape::apply_grads`] accumulates their gradient into the store. Binding a
//! leaf whose value differs from the stored parameter is deliberate: the
//! straight-through estimator for score-trained masked weights binds the
//! effective weights' gradient to the score tensor.

use crate::error::{Error, Result};
use crate::ops;
use crate::optim::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    MatMulNt {
        a: NodeId,
        b: NodeId,
    },
    MatMulNn {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    AddTable {
        a: NodeId,
        table: NodeId,
    },
    MulMask {
        a: NodeId,
        mask: Tensor<T>,
    },
    Scale {
        a: NodeId,
        c: T,
    },
    Relu {
        a: NodeId,
    },
    SoftmaxLast {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        bias: Option<NodeId>,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    SliceLast {
        a: NodeId,
        start: usize,
    },
    ConcatLast {
        parts: Vec<NodeId>,
    },
    SelectTime {
        a: NodeId,
        t: usize,
    },
    TakeRows {
        a: NodeId,
    },
    MeanTimeWeighted {
        a: NodeId,
        weights: Tensor<T>,
    },
    SumAll {
        a: NodeId,
    },
    MseRows {
        pred: NodeId,
        target: Tensor<T>,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-channel statistics a batch-norm node observed, for running-estimate
/// updates owned by the caller.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, param: Option<ParamId>, needs: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            param,
            needs_grad: needs,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, None, false)
    }

    /// Leaf whose gradient is retrievable after [`Tape::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, None, true)
    }

    /// Leaf holding the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Leaf, Some(id), true)
    }

    /// Leaf with an explicit value whose gradient is routed to `id`.
    pub fn param_with_value(&mut self, value: Tensor<T>, id: ParamId) -> NodeId {
        self.push(value, Op::Leaf, Some(id), true)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulNt { a, b }, None, needs))
    }

    pub fn matmul_nn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_nn(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulNn { a, b }, None, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, None, needs))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_bias(self.value(a), self.value(bias))?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(v, Op::AddBias { a, bias }, None, needs))
    }

    pub fn add_table(&mut self, a: NodeId, table: NodeId) -> Result<NodeId> {
        let v = ops::add_table(self.value(a), self.value(table))?;
        let needs = self.needs(a) || self.needs(table);
        Ok(self.push(v, Op::AddTable { a, table }, None, needs))
    }

    /// Element-wise product with a constant 0/1 (or any fixed) mask. A rank-2
    /// mask broadcasts over the batch axis of a rank-3 input.
    pub fn mul_mask(&mut self, a: NodeId, mask: Tensor<T>) -> Result<NodeId> {
        let v = mul_bcast(self.value(a), &mask)?;
        let needs = self.needs(a);
        Ok(self.push(v, Op::MulMask { a, mask }, None, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        let needs = self.needs(a);
        self.push(v, Op::Scale { a, c }, None, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = ops::relu(self.value(a));
        let needs = self.needs(a);
        self.push(v, Op::Relu { a }, None, needs)
    }

    /// Masked softmax over the last axis; masks are constants of the step.
    pub fn softmax_last(
        &mut self,
        a: NodeId,
        row_mask: Option<&Tensor<T>>,
        key_valid: Option<&Tensor<T>>,
    ) -> Result<NodeId> {
        let v = ops::softmax_last(self.value(a), row_mask, key_valid)?;
        let needs = self.needs(a);
        Ok(self.push(v, Op::SoftmaxLast { a }, None, needs))
    }

    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: Option<NodeId>,
        eps: T,
    ) -> Result<NodeId> {
        let out = ops::layer_norm(
            self.value(a),
            self.value(gain),
            bias.map(|b| self.value(b)),
            eps,
        )?;
        let needs =
            self.needs(a) || self.needs(gain) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            out.y,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            None,
            needs,
        ))
    }

    /// Training-mode batch norm; returns the node and the batch statistics so
    /// the caller can maintain running estimates.
    pub fn batch_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    ) -> Result<(NodeId, BatchStats<T>)> {
        let out = ops::batch_norm_train(self.value(a), self.value(gain), self.value(bias), eps)?;
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        let stats = BatchStats {
            mean: out.mean,
            var_unbiased: out.var_unbiased,
        };
        let id = self.push(
            out.y,
            Op::BatchNorm {
                a,
                gain,
                bias,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            None,
            needs,
        );
        Ok((id, stats))
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        let rank = x.rank();
        let d = x.dim(rank - 1);
        if start + len > d {
            return Err(Error::shape("slice_last", x.dims(), &[start, len]));
        }
        let mut dims = x.dims().to_vec();
        dims[rank - 1] = len;
        let rows = x.numel() / d;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * d + start..r * d + start + len]);
        }
        let v = Tensor::from_vec(&dims, data)?;
        let needs = self.needs(a);
        Ok(self.push(v, Op::SliceLast { a, start }, None, needs))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::config("concat_last of zero tensors"));
        }
        let first = self.value(parts[0]);
        let rank = first.rank();
        let lead = first.dims()[..rank - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != rank || t.dims()[..rank - 1] != lead[..] {
                return Err(Error::shape("concat_last", first.dims(), t.dims()));
            }
            total += t.dim(rank - 1);
        }
        let rows: usize = lead.iter().product();
        let mut dims = lead.clone();
        dims.push(total);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let d = t.dim(rank - 1);
                data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
            }
        }
        let v = Tensor::from_vec(&dims, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            v,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
            None,
            needs,
        ))
    }

    /// Row `t` of the time axis: `(batch, w, d)` -> `(batch, d)`.
    pub fn select_time(&mut self, a: NodeId, t: usize) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() != 3 || t >= x.dim(1) {
            return Err(Error::shape("select_time", x.dims(), &[t]));
        }
        let (nb, w, d) = (x.dim(0), x.dim(1), x.dim(2));
        let mut data = Vec::with_capacity(nb * d);
        for b in 0..nb {
            data.extend_from_slice(&x.data()[(b * w + t) * d..(b * w + t) * d + d]);
        }
        let v = Tensor::from_vec(&[nb, d], data)?;
        let needs = self.needs(a);
        Ok(self.push(v, Op::SelectTime { a, t }, None, needs))
    }

    /// First `rows` rows of a rank-2 tensor (e.g. slicing an over-allocated
    /// positional table down to the window length).
    pub fn take_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() != 2 || rows > x.dim(0) {
            return Err(Error::shape("take_rows", x.dims(), &[rows]));
        }
        let c = x.dim(1);
        let v = Tensor::from_vec(&[rows, c], x.data()[..rows * c].to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(v, Op::TakeRows { a }, None, needs))
    }

    /// Weighted mean over the time axis: `(batch, w, d)` with `(batch, w)`
    /// weights -> `(batch, d)`. Weights are constants (e.g. 1/len over valid
    /// steps).
    pub fn mean_time_weighted(&mut self, a: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() != 3 || weights.dims() != [x.dim(0), x.dim(1)] {
            return Err(Error::shape("mean_time_weighted", x.dims(), weights.dims()));
        }
        let (nb, w, d) = (x.dim(0), x.dim(1), x.dim(2));
        let mut v = Tensor::zeros(&[nb, d]);
        for b in 0..nb {
            for t in 0..w {
                let wgt = weights.at2(b, t);
                for j in 0..d {
                    let cur = v.at2(b, j);
                    v.set2(b, j, cur + wgt * x.at3(b, t, j));
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(v, Op::MeanTimeWeighted { a, weights }, None, needs))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, None, needs)
    }

    /// Mean squared error against a constant target; scalar node.
    pub fn mse_loss(&mut self, pred: NodeId, target: Tensor<T>) -> Result<NodeId> {
        let loss = ops::mse(self.value(pred), &target)?;
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), Op::MseRows { pred, target }, None, needs))
    }

    /// Mean cross-entropy of `(batch, classes)` logits; scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), &labels)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            },
            None,
            needs,
        ))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.value(loss).dims(), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulate gradients of parameter-bound leaves into the store.
    pub fn apply_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = grads.grads[i].as_ref() {
                    store.accumulate_grad(pid, g)?;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let acc = |id: NodeId, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| -> Result<()> {
            if !self.needs(id) {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t)?,
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt { a, b } => {
                // y = a·bᵀ: da = g·b, db = gᵀ·a (batch-folded for rank-2 b)
                if self.needs(*a) {
                    let da = ops::matmul_nn(g, self.value(*b))?;
                    acc(*a, da, grads)?;
                }
                if self.needs(*b) {
                    let vb = self.value(*b);
                    let db = if vb.rank() == 2 && g.rank() == 3 {
                        ops::fold_tn(g, self.value(*a))?
                    } else {
                        ops::matmul_tn(g, self.value(*a))?
                    };
                    acc(*b, db, grads)?;
                }
            }
            Op::MatMulNn { a, b } => {
                // y = a·b: da = g·bᵀ, db = aᵀ·g
                if self.needs(*a) {
                    let da = ops::matmul_nt(g, self.value(*b))?;
                    acc(*a, da, grads)?;
                }
                if self.needs(*b) {
                    let vb = self.value(*b);
                    let db = if vb.rank() == 2 && g.rank() == 3 {
                        ops::fold_tn(self.value(*a), g)?
                    } else {
                        ops::matmul_tn(self.value(*a), g)?
                    };
                    acc(*b, db, grads)?;
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.clone(), grads)?;
            }
            Op::AddBias { a, bias } => {
                acc(*a, g.clone(), grads)?;
                if self.needs(*bias) {
                    acc(*bias, ops::sum_to_last_axis(g), grads)?;
                }
            }
            Op::AddTable { a, table } => {
                acc(*a, g.clone(), grads)?;
                if self.needs(*table) {
                    acc(*table, ops::sum_over_batch(g)?, grads)?;
                }
            }
            Op::MulMask { a, mask } => {
                acc(*a, mul_bcast(g, mask)?, grads)?;
            }
            Op::Scale { a, c } => {
                acc(*a, g.scale(*c), grads)?;
            }
            Op::Relu { a } => {
                let x = self.value(*a);
                let da = g.zip_map(x, "relu_bwd", |gi, xi| {
                    if xi > T::zero() {
                        gi
                    } else {
                        T::zero()
                    }
                })?;
                acc(*a, da, grads)?;
            }
            Op::SoftmaxLast { a } => {
                let y = &node.value;
                let cols = y.dim(y.rank() - 1);
                let rows = y.numel() / cols;
                let mut da = Tensor::zeros(y.dims());
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mut dot = T::zero();
                    for (&yj, &gj) in yr.iter().zip(gr) {
                        dot += yj * gj;
                    }
                    let dr = &mut da.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, da, grads)?;
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = xhat.dim(xhat.rank() - 1);
                let rows = xhat.numel() / d;
                if self.needs(*gain) {
                    let gx = g.mul(xhat)?;
                    acc(*gain, ops::sum_to_last_axis(&gx), grads)?;
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        acc(*b, ops::sum_to_last_axis(g), grads)?;
                    }
                }
                if self.needs(*a) {
                    let gamma = self.value(*gain);
                    let n = T::from_f64(d as f64);
                    let mut da = Tensor::zeros(xhat.dims());
                    for r in 0..rows {
                        let xh = &xhat.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gamma.data()[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh = mean_dxh / n;
                        mean_dxh_xh = mean_dxh_xh / n;
                        let istd = inv_std[r];
                        let dr = &mut da.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = gr[j] * gamma.data()[j];
                            dr[j] = istd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    acc(*a, da, grads)?;
                }
            }
            Op::BatchNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = xhat.dim(2);
                let rows = xhat.numel() / d;
                if self.needs(*gain) {
                    let gx = g.mul(xhat)?;
                    acc(*gain, ops::sum_to_last_axis(&gx), grads)?;
                }
                if self.needs(*bias) {
                    acc(*bias, ops::sum_to_last_axis(g), grads)?;
                }
                if self.needs(*a) {
                    let gamma = self.value(*gain);
                    let n = T::from_f64(rows as f64);
                    let mut mean_dxh = vec![T::zero(); d];
                    let mut mean_dxh_xh = vec![T::zero(); d];
                    for (idx, &gv) in g.data().iter().enumerate() {
                        let c = idx % d;
                        let dxh = gv * gamma.data()[c];
                        mean_dxh[c] += dxh;
                        mean_dxh_xh[c] += dxh * xhat.data()[idx];
                    }
                    for c in 0..d {
                        mean_dxh[c] = mean_dxh[c] / n;
                        mean_dxh_xh[c] = mean_dxh_xh[c] / n;
                    }
                    let mut da = Tensor::zeros(xhat.dims());
                    for idx in 0..xhat.numel() {
                        let c = idx % d;
                        let dxh = g.data()[idx] * gamma.data()[c];
                        da.data_mut()[idx] =
                            inv_std[c] * (dxh - mean_dxh[c] - xhat.data()[idx] * mean_dxh_xh[c]);
                    }
                    acc(*a, da, grads)?;
                }
            }
            Op::SliceLast { a, start } => {
                let x = self.value(*a);
                let rank = x.rank();
                let d = x.dim(rank - 1);
                let len = g.dim(rank - 1);
                let rows = x.numel() / d;
                let mut da = Tensor::zeros(x.dims());
                for r in 0..rows {
                    da.data_mut()[r * d + start..r * d + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(*a, da, grads)?;
            }
            Op::ConcatLast { parts } => {
                let rank = g.rank();
                let total = g.dim(rank - 1);
                let rows = g.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let d = t.dim(rank - 1);
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(t.dims());
                        for r in 0..rows {
                            dp.data_mut()[r * d..(r + 1) * d]
                                .copy_from_slice(&g.data()[r * total + offset..r * total + offset + d]);
                        }
                        acc(p, dp, grads)?;
                    }
                    offset += d;
                }
            }
            Op::TakeRows { a } => {
                let x = self.value(*a);
                let mut da = Tensor::zeros(x.dims());
                da.data_mut()[..g.numel()].copy_from_slice(g.data());
                acc(*a, da, grads)?;
            }
            Op::SelectTime { a, t } => {
                let x = self.value(*a);
                let (nb, w, d) = (x.dim(0), x.dim(1), x.dim(2));
                let mut da = Tensor::zeros(&[nb, w, d]);
                for b in 0..nb {
                    da.data_mut()[(b * w + t) * d..(b * w + t) * d + d]
                        .copy_from_slice(&g.data()[b * d..(b + 1) * d]);
                }
                acc(*a, da, grads)?;
            }
            Op::MeanTimeWeighted { a, weights } => {
                let x = self.value(*a);
                let (nb, w, d) = (x.dim(0), x.dim(1), x.dim(2));
                let mut da = Tensor::zeros(&[nb, w, d]);
                for b in 0..nb {
                    for t in 0..w {
                        let wgt = weights.at2(b, t);
                        for j in 0..d {
                            da.set3(b, t, j, wgt * g.at2(b, j));
                        }
                    }
                }
                acc(*a, da, grads)?;
            }
            Op::SumAll { a } => {
                let gs = g.item();
                acc(*a, Tensor::filled(self.value(*a).dims(), gs), grads)?;
            }
            Op::MseRows { pred, target } => {
                let p = self.value(*pred);
                let scale = T::from_f64(2.0 / p.numel() as f64) * g.item();
                let da = p.zip_map(target, "mse_bwd", |pi, ti| (pi - ti) * scale)?;
                acc(*pred, da, grads)?;
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let nb = labels.len();
                let scale = g.item() / T::from_f64(nb as f64);
                let mut da = probs.scale(scale);
                let classes = probs.dim(1);
                for (r, &label) in labels.iter().enumerate() {
                    let idx = r * classes + label;
                    da.data_mut()[idx] = da.data()[idx] - scale;
                }
                acc(*logits, da, grads)?;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mul_bcast<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    if x.dims() == mask.dims() {
        return x.mul(mask);
    }
    if x.rank() == 3 && mask.rank() == 2 && x.dims()[1..] == *mask.dims() {
        let slab = mask.numel();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * mask.data()[i % slab];
        }
        return Ok(out);
    }
    Err(Error::shape("mul_mask", x.dims(), mask.dims()))
}
