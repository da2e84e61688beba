//! Multi-head self-attention with maskable score matrices and maskable
//! Q/K/V projections.
//!
//! Variants:
//! - `Canonical`: softmax(QKᵀ/√d′)·V per head.
//! - `StepT`: additive mask so rows `0..w−2` attend only to themselves
//!   (making them exact copies of V) while the final row attends to all past
//!   steps but not itself.
//! - `QkvRandom`: fixed element-wise binary masks over `(w, d)` applied to
//!   the Q/K/V projection outputs, sampled once per module and shared by all
//!   heads, identical at train and test time.
//! - `QkvMagnitude`: per-sample top-k-|value| masks over each projection,
//!   recomputed every forward pass.
//! - `Identity`: the attention matrix forced to the identity (ablation).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Canonical,
    StepT,
    QkvRandom,
    QkvMagnitude,
    Identity,
}

/// Additive score mask for single-step attention: rows `0..w−2` keep only
/// the diagonal; row `w−1` keeps `0..w−2` and masks itself.
pub fn step_t_mask<T: Scalar>(w: usize) -> Result<Tensor<T>> {
    if w < 2 {
        return Err(Error::config(
            "single-step attention needs window length >= 2 (the current step attends only to the past)",
        ));
    }
    let neg = T::neg_infinity();
    let mut m = Tensor::filled(&[w, w], neg);
    for t in 0..w - 1 {
        m.set2(t, t, T::zero());
    }
    for j in 0..w - 1 {
        m.set2(w - 1, j, T::zero());
    }
    Ok(m)
}

/// Additive mask forcing the attention matrix to the identity.
pub fn identity_mask<T: Scalar>(w: usize) -> Tensor<T> {
    let neg = T::neg_infinity();
    let mut m = Tensor::filled(&[w, w], neg);
    for t in 0..w {
        m.set2(t, t, T::zero());
    }
    m
}

/// Binary `(w, d)` mask with exactly `floor(w·d·(1−p_a))` kept entries,
/// chosen uniformly without replacement.
pub fn sample_activation_mask<T: Scalar, R: Rng>(
    rng: &mut R,
    w: usize,
    d: usize,
    p_a: f64,
) -> Tensor<T> {
    let total = w * d;
    let keep = (total as f64 * (1.0 - p_a)).floor() as usize;
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(rng);
    let mut m = Tensor::zeros(&[w, d]);
    for &i in idx.iter().take(keep) {
        m.data_mut()[i] = T::one();
    }
    m
}

/// Per-sample top-k-|value| mask over the trailing `(w, d)` slab of a
/// `(batch, w, d)` tensor; keeps `floor(w·d·(1−p_a))` entries per sample,
/// ties keeping the lower flat index.
pub fn magnitude_mask<T: Scalar>(x: &Tensor<T>, p_a: f64) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape("magnitude_mask", x.dims(), &[0, 0, 0]));
    }
    let slab = x.dim(1) * x.dim(2);
    let keep = (slab as f64 * (1.0 - p_a)).floor() as usize;
    let mut m = Tensor::zeros(x.dims());
    for b in 0..x.dim(0) {
        let xs = &x.data()[b * slab..(b + 1) * slab];
        let mut order: Vec<usize> = (0..slab).collect();
        order.sort_by(|&i, &j| {
            xs[j]
                .abs()
                .partial_cmp(&xs[i].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        for &i in order.iter().take(keep) {
            m.data_mut()[b * slab + i] = T::one();
        }
    }
    Ok(m)
}

/// Everything attention needs beyond the projections themselves: head split,
/// score scaling, and the fixed masks of the chosen variant.
#[derive(Debug, Clone)]
pub struct AttentionPlan<T: Scalar> {
    pub variant: AttentionVariant,
    pub heads: usize,
    pub d: usize,
    pub p_a: f64,
    pub scale_by_full_d: bool,
    pub row_mask: Option<Tensor<T>>,
    pub qkv_masks: Option<[Tensor<T>; 3]>,
}

impl<T: Scalar> AttentionPlan<T> {
    pub fn build(
        variant: AttentionVariant,
        heads: usize,
        d: usize,
        w: usize,
        p_a: f64,
        mask_seed: u64,
        scale_by_full_d: bool,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "model width {d} not divisible by head count {heads}"
            )));
        }
        if !(0.0..1.0).contains(&p_a) {
            return Err(Error::config(format!(
                "activation prune rate {p_a} outside [0,1)"
            )));
        }
        let row_mask = match variant {
            AttentionVariant::StepT => Some(step_t_mask(w)?),
            AttentionVariant::Identity => Some(identity_mask(w)),
            _ => None,
        };
        let qkv_masks = if variant == AttentionVariant::QkvRandom {
            let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
            Some([
                sample_activation_mask(&mut rng, w, d, p_a),
                sample_activation_mask(&mut rng, w, d, p_a),
                sample_activation_mask(&mut rng, w, d, p_a),
            ])
        } else {
            None
        };
        Ok(AttentionPlan {
            variant,
            heads,
            d,
            p_a,
            scale_by_full_d,
            row_mask,
            qkv_masks,
        })
    }

    fn score_scale(&self) -> T {
        let denom = if self.scale_by_full_d {
            self.d
        } else {
            self.d / self.heads
        };
        T::from_f64(1.0 / (denom as f64).sqrt())
    }
}

/// Attention over already-projected `(batch, w, d)` Q/K/V nodes. Applies the
/// plan's activation masks, splits heads, computes masked softmax scores, and
/// concatenates head outputs; the output projection stays with the caller.
/// `key_valid` marks real (1) versus padded (0) key positions per sample.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    plan: &AttentionPlan<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    key_valid: Option<&Tensor<T>>,
) -> Result<NodeId> {
    let (q, k, v) = match plan.variant {
        AttentionVariant::QkvRandom => {
            let masks = plan
                .qkv_masks
                .as_ref()
                .ok_or_else(|| Error::config("random-mask attention without sampled masks"))?;
            (
                tape.mul_mask(q, masks[0].clone())?,
                tape.mul_mask(k, masks[1].clone())?,
                tape.mul_mask(v, masks[2].clone())?,
            )
        }
        AttentionVariant::QkvMagnitude => {
            let mq = magnitude_mask(tape.value(q), plan.p_a)?;
            let mk = magnitude_mask(tape.value(k), plan.p_a)?;
            let mv = magnitude_mask(tape.value(v), plan.p_a)?;
            (
                tape.mul_mask(q, mq)?,
                tape.mul_mask(k, mk)?,
                tape.mul_mask(v, mv)?,
            )
        }
        _ => (q, k, v),
    };

    let dp = plan.d / plan.heads;
    let scale = plan.score_scale();
    let mut heads = Vec::with_capacity(plan.heads);
    for head in 0..plan.heads {
        let qh = tape.slice_last(q, head * dp, dp)?;
        let kh = tape.slice_last(k, head * dp, dp)?;
        let vh = tape.slice_last(v, head * dp, dp)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_last(scaled, plan.row_mask.as_ref(), key_valid)?;
        heads.push(tape.matmul_nn(attn, vh)?);
    }
    tape.concat_last(&heads)
}
