//! Forward math shared by the training tape and the frozen runtime.
//!
//! Matmul comes in the three orientations the encoder needs (`nn`, `nt`,
//! `tn`). Rank-3 operands are treated as a batch of rank-2 slabs; a rank-2
//! right-hand side is broadcast across the batch. Accumulation happens in the
//! element type itself.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn gemm_nn<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize, out: &mut [T]) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let out_row = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

fn gemm_nt<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize, out: &mut [T]) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let b_row = &b[j * q..(j + 1) * q];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * r + j] += acc;
        }
    }
}

fn gemm_tn<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize, out: &mut [T]) {
    // out (q,r) += aᵀ·b for a (p,q), b (p,r)
    for k in 0..p {
        let a_row = &a[k * q..(k + 1) * q];
        let b_row = &b[k * r..(k + 1) * r];
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out[i * r..(i + 1) * r];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
}

enum MmKind {
    Nn,
    Nt,
    Tn,
}

fn matmul_dispatch<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: MmKind) -> Result<Tensor<T>> {
    let (op, f): (_, fn(&[T], &[T], usize, usize, usize, &mut [T])) = match kind {
        MmKind::Nn => ("matmul_nn", gemm_nn::<T>),
        MmKind::Nt => ("matmul_nt", gemm_nt::<T>),
        MmKind::Tn => ("matmul_tn", gemm_tn::<T>),
    };
    let err = || Err(Error::shape(op, a.dims(), b.dims()));
    // Per-slab dims: a is (p,q); result dims depend on orientation.
    let slab = |ad: &[usize], bd: &[usize]| -> Option<(usize, usize, usize)> {
        let (p, q) = (ad[0], ad[1]);
        match kind {
            MmKind::Nn => (bd[0] == q).then(|| (p, q, bd[1])),
            MmKind::Nt => (bd[1] == q).then(|| (p, q, bd[0])),
            MmKind::Tn => (bd[0] == p).then(|| (p, q, bd[1])),
        }
    };
    let out_dims = |p: usize, q: usize, r: usize| match kind {
        MmKind::Nn | MmKind::Nt => [p, r],
        MmKind::Tn => [q, r],
    };
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let Some((p, q, r)) = slab(a.dims(), b.dims()) else {
                return err();
            };
            let mut out = Tensor::zeros(&out_dims(p, q, r));
            f(a.data(), b.data(), p, q, r, out.data_mut());
            Ok(out)
        }
        (3, 2) => {
            let nb = a.dim(0);
            let Some((p, q, r)) = slab(&a.dims()[1..], b.dims()) else {
                return err();
            };
            let od = out_dims(p, q, r);
            let mut out = Tensor::zeros(&[nb, od[0], od[1]]);
            let slab_out = od[0] * od[1];
            for ib in 0..nb {
                f(
                    a.batch(ib),
                    b.data(),
                    p,
                    q,
                    r,
                    &mut out.data_mut()[ib * slab_out..(ib + 1) * slab_out],
                );
            }
            Ok(out)
        }
        (3, 3) => {
            if a.dim(0) != b.dim(0) {
                return err();
            }
            let nb = a.dim(0);
            let Some((p, q, r)) = slab(&a.dims()[1..], &b.dims()[1..]) else {
                return err();
            };
            let od = out_dims(p, q, r);
            let mut out = Tensor::zeros(&[nb, od[0], od[1]]);
            let slab_out = od[0] * od[1];
            for ib in 0..nb {
                f(
                    a.batch(ib),
                    b.batch(ib),
                    p,
                    q,
                    r,
                    &mut out.data_mut()[ib * slab_out..(ib + 1) * slab_out],
                );
            }
            Ok(out)
        }
        _ => err(),
    }
}

/// `a · b`.
pub fn matmul_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_dispatch(a, b, MmKind::Nn)
}

/// `a · bᵀ` (transpose on the last two axes of `b`).
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_dispatch(a, b, MmKind::Nt)
}

/// `aᵀ · b` (transpose on the last two axes of `a`).
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_dispatch(a, b, MmKind::Tn)
}

/// `Σ_batch a_bᵀ · b_b`, the weight-gradient contraction for a rank-2
/// parameter applied across a batch.
pub fn fold_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() == 2 && b.rank() == 2 {
        return matmul_tn(a, b);
    }
    if a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) {
        return Err(Error::shape("fold_tn", a.dims(), b.dims()));
    }
    let (nb, p, q, r) = (a.dim(0), a.dim(1), a.dim(2), b.dim(2));
    let mut out = Tensor::zeros(&[q, r]);
    for ib in 0..nb {
        gemm_tn(a.batch(ib), b.batch(ib), p, q, r, out.data_mut());
    }
    Ok(out)
}

/// Sum a rank-2 or rank-3 tensor down to its trailing axis.
pub fn sum_to_last_axis<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.dim(x.rank() - 1);
    let mut out = Tensor::zeros(&[d]);
    for (i, &v) in x.data().iter().enumerate() {
        out.data_mut()[i % d] += v;
    }
    out
}

/// Sum a rank-3 tensor over its batch axis.
pub fn sum_over_batch<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape("sum_over_batch", x.dims(), &[]));
    }
    let (nb, p, q) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(&[p, q]);
    for ib in 0..nb {
        for (o, &v) in out.data_mut().iter_mut().zip(x.batch(ib)) {
            *o += v;
        }
    }
    Ok(out)
}

/// `x + bias` with a rank-1 bias broadcast over every row.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dim(x.rank() - 1);
    if bias.rank() != 1 || bias.dim(0) != d {
        return Err(Error::shape("add_bias", x.dims(), bias.dims()));
    }
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % d];
    }
    Ok(out)
}

/// `x + table` with a rank-2 table broadcast over the batch axis.
pub fn add_table<T: Scalar>(x: &Tensor<T>, table: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 || table.rank() != 2 || x.dims()[1..] != *table.dims() {
        return Err(Error::shape("add_table", x.dims(), table.dims()));
    }
    let slab = table.numel();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += table.data()[i % slab];
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Softmax over the last axis with optional masking.
///
/// `row_mask` is an additive `(rows, cols)` mask shared across the batch;
/// `-inf` entries are excluded from the distribution, finite entries are added
/// to the logits. `key_valid` is a `(batch, cols)` validity indicator (1 keep,
/// 0 exclude) for rank-3 inputs. A row with no admissible entry softmaxes to
/// all zeros rather than NaN.
pub fn softmax_last<T: Scalar>(
    x: &Tensor<T>,
    row_mask: Option<&Tensor<T>>,
    key_valid: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let rank = x.rank();
    if rank < 1 {
        return Err(Error::shape("softmax_last", x.dims(), &[]));
    }
    let cols = x.dim(rank - 1);
    let rows_per_batch = if rank >= 2 { x.dim(rank - 2) } else { 1 };
    if let Some(m) = row_mask {
        if m.rank() != 2 || m.dim(0) != rows_per_batch || m.dim(1) != cols {
            return Err(Error::shape("softmax_last(mask)", x.dims(), m.dims()));
        }
    }
    let batches = x.numel() / (rows_per_batch * cols);
    if let Some(v) = key_valid {
        if rank != 3 || v.rank() != 2 || v.dim(0) != batches || v.dim(1) != cols {
            return Err(Error::shape("softmax_last(valid)", x.dims(), v.dims()));
        }
    }

    let mut out = Tensor::zeros(x.dims());
    let neg_inf = T::neg_infinity();
    let mut logits = vec![T::zero(); cols];
    for b in 0..batches {
        for r in 0..rows_per_batch {
            let base = (b * rows_per_batch + r) * cols;
            let row = &x.data()[base..base + cols];
            let mut any = false;
            for j in 0..cols {
                let mut v = row[j];
                if let Some(m) = row_mask {
                    v = v + m.at2(r, j);
                }
                if let Some(kv) = key_valid {
                    if kv.at2(b, j) == T::zero() {
                        v = neg_inf;
                    }
                }
                logits[j] = v;
                if v > neg_inf {
                    any = true;
                }
            }
            if !any {
                continue; // fully masked row stays zero
            }
            let mut mx = neg_inf;
            for &v in logits.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            let out_row = &mut out.data_mut()[base..base + cols];
            for (o, &v) in out_row.iter_mut().zip(logits.iter()) {
                if v > neg_inf {
                    let e = (v - mx).exp();
                    *o = e;
                    sum += e;
                } else {
                    *o = T::zero();
                }
            }
            for o in out_row.iter_mut() {
                *o = *o / sum;
            }
        }
    }
    Ok(out)
}

pub struct LayerNormOut<T> {
    pub y: Tensor<T>,
    /// Normalized activations before the affine transform.
    pub xhat: Tensor<T>,
    /// One inverse standard deviation per normalized row.
    pub inv_std: Vec<T>,
}

/// Layer normalization over the last axis (biased variance), with a gain and
/// optional bias.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    eps: T,
) -> Result<LayerNormOut<T>> {
    let d = x.dim(x.rank() - 1);
    if gain.rank() != 1 || gain.dim(0) != d {
        return Err(Error::shape("layer_norm", x.dims(), gain.dims()));
    }
    if let Some(b) = bias {
        if b.rank() != 1 || b.dim(0) != d {
            return Err(Error::shape("layer_norm(bias)", x.dims(), b.dims()));
        }
    }
    let rows = x.numel() / d;
    let mut xhat = Tensor::zeros(x.dims());
    let mut y = Tensor::zeros(x.dims());
    let mut inv_std = Vec::with_capacity(rows);
    let n = T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / n;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            xhat.data_mut()[r * d + j] = xh;
            let mut v = xh * gain.data()[j];
            if let Some(b) = bias {
                v += b.data()[j];
            }
            y.data_mut()[r * d + j] = v;
        }
    }
    Ok(LayerNormOut { y, xhat, inv_std })
}

pub struct BatchNormOut<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (population) variance, used for normalization.
    pub var_biased: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

/// Training-mode batch normalization of a `(batch, rows, channels)` tensor;
/// statistics pool over batch and rows per channel.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<BatchNormOut<T>> {
    if x.rank() != 3 {
        return Err(Error::shape("batch_norm", x.dims(), &[]));
    }
    let d = x.dim(2);
    if gain.dims() != [d] || bias.dims() != [d] {
        return Err(Error::shape("batch_norm", x.dims(), gain.dims()));
    }
    let rows = x.dim(0) * x.dim(1);
    if rows < 2 {
        return Err(Error::data(
            "batch norm needs at least two pooled rows per channel",
        ));
    }
    let n = T::from_f64(rows as f64);
    let mut mean = vec![T::zero(); d];
    for (i, &v) in x.data().iter().enumerate() {
        mean[i % d] += v;
    }
    for m in mean.iter_mut() {
        *m = *m / n;
    }
    let mut var = vec![T::zero(); d];
    for (i, &v) in x.data().iter().enumerate() {
        let c = v - mean[i % d];
        var[i % d] += c * c;
    }
    let mut var_biased = var.clone();
    for v in var_biased.iter_mut() {
        *v = *v / n;
    }
    let n_unbiased = T::from_f64((rows - 1) as f64);
    let mut var_unbiased = var;
    for v in var_unbiased.iter_mut() {
        *v = *v / n_unbiased;
    }
    let inv_std: Vec<T> = var_biased
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let mut xhat = Tensor::zeros(x.dims());
    let mut y = Tensor::zeros(x.dims());
    for (i, &v) in x.data().iter().enumerate() {
        let c = i % d;
        let xh = (v - mean[c]) * inv_std[c];
        xhat.data_mut()[i] = xh;
        y.data_mut()[i] = xh * gain.data()[c] + bias.data()[c];
    }
    Ok(BatchNormOut {
        y,
        xhat,
        inv_std,
        mean,
        var_biased,
        var_unbiased,
    })
}

/// Inference-mode batch normalization using running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.dim(x.rank() - 1);
    if gain.dims() != [d]
        || bias.dims() != [d]
        || running_mean.dims() != [d]
        || running_var.dims() != [d]
    {
        return Err(Error::shape("batch_norm_eval", x.dims(), gain.dims()));
    }
    let scale: Vec<T> = (0..d)
        .map(|c| gain.data()[c] / (running_var.data()[c] + eps).sqrt())
        .collect();
    let mut y = Tensor::zeros(x.dims());
    for (i, &v) in x.data().iter().enumerate() {
        let c = i % d;
        y.data_mut()[i] = (v - running_mean.data()[c]) * scale[c] + bias.data()[c];
    }
    Ok(y)
}

/// Mean squared error over all elements of `pred` against `target`.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.dims() != target.dims() {
        return Err(Error::shape("mse", pred.dims(), target.dims()));
    }
    let n = T::from_f64(pred.numel() as f64);
    let mut acc = T::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let e = p - t;
        acc += e * e;
    }
    Ok(acc / n)
}

/// Per-row mean squared error of a `(batch, features)` prediction.
pub fn mse_per_row<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<T>> {
    if pred.dims() != target.dims() || pred.rank() != 2 {
        return Err(Error::shape("mse_per_row", pred.dims(), target.dims()));
    }
    let (b, d) = (pred.dim(0), pred.dim(1));
    let n = T::from_f64(d as f64);
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let mut acc = T::zero();
        for j in 0..d {
            let e = pred.at2(r, j) - target.at2(r, j);
            acc += e * e;
        }
        out.push(acc / n);
    }
    Ok(out)
}

/// Mean cross-entropy of `(batch, classes)` logits against integer labels.
/// Returns the loss and the softmax probabilities (reused by the backward
/// pass).
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::shape("cross_entropy", logits.dims(), &[labels.len()]));
    }
    let classes = logits.dim(1);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let probs = softmax_last(logits, None, None)?;
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let p = probs.at2(r, label);
        loss -= p.max(T::from_f64(1e-300)).ln();
    }
    Ok((loss / T::from_f64(labels.len() as f64), probs))
}

/// Sinusoidal positional encoding table of shape `(w, d)`.
pub fn sinusoidal_encoding<T: Scalar>(w: usize, d: usize) -> Tensor<T> {
    let mut table = Tensor::zeros(&[w, d]);
    for pos in 0..w {
        for j in 0..d {
            let pair = (j / 2) * 2;
            let angle = pos as f64 / 10_000f64.powf(pair as f64 / d as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            table.set2(pos, j, T::from_f64(v));
        }
    }
    table
}
