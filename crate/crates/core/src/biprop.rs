//! Sparse-binary parameterization of linear and norm-gain modules.
//!
//! A module keeps a frozen random latent tensor `W` and a trainable score
//! tensor `S` of the same shape. Each forward pass keeps the
//! `total − floor(total·p)` largest-|S| entries (mask `M`), rescales the
//! surviving signs by `α = mean |W| over survivors`, and runs with
//! `W_eff = α·(sign(W) ⊙ M)`. Gradients flow to `S` through the
//! straight-through estimator: the effective weights are pushed onto the tape
//! as a leaf bound to the score parameter, so `∂L/∂S = ∂L/∂W_eff` and pruned
//! entries keep receiving gradient and may re-enter. `M` and `α` are
//! constants within a step and recomputed from the updated scores on the
//! next. Freezing emits the `(M, sign, α)` triple the packed container and
//! inference runtime consume.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of surviving entries for a module of `total` weights at prune rate
/// `p`: `total − floor(total·p)`.
pub fn keep_count(total: usize, p: f64) -> usize {
    total - (total as f64 * p).floor() as usize
}

/// Binary keep mask (one byte per entry, values 0/1): the `keep_count`
/// largest-|S| entries survive; ties keep the lower flat index.
pub fn compute_mask<T: Scalar>(scores: &Tensor<T>, p: f64) -> Result<Vec<u8>> {
    if scores.numel() == 0 {
        return Err(Error::config("mask over empty score tensor"));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("prune rate {p} outside [0,1)")));
    }
    let keep = keep_count(scores.numel(), p);
    let mut order: Vec<usize> = (0..scores.numel()).collect();
    order.sort_by(|&a, &b| {
        scores.data()[b]
            .abs()
            .partial_cmp(&scores.data()[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![0u8; scores.numel()];
    for &i in order.iter().take(keep) {
        mask[i] = 1;
    }
    Ok(mask)
}

/// Mean absolute latent value over surviving entries; 0 for an all-zero mask.
pub fn compute_alpha<T: Scalar>(latent: &Tensor<T>, mask: &[u8]) -> T {
    let mut sum = T::zero();
    let mut count = 0usize;
    for (w, &m) in latent.data().iter().zip(mask) {
        if m != 0 {
            sum += w.abs();
            count += 1;
        }
    }
    if count == 0 {
        T::zero()
    } else {
        sum / T::from_f64(count as f64)
    }
}

/// `α·(sign(W) ⊙ M)` with `sign(0) = +1`.
pub fn materialize<T: Scalar>(latent: &Tensor<T>, mask: &[u8], alpha: T) -> Tensor<T> {
    let mut out = Tensor::zeros(latent.dims());
    for (i, (w, &m)) in latent.data().iter().zip(mask).enumerate() {
        if m != 0 {
            out.data_mut()[i] = if *w < T::zero() { -alpha } else { alpha };
        }
    }
    out
}

/// Fraction of mask entries that differ between two epochs' masks.
pub fn mask_churn(old: &[u8], new: &[u8]) -> f64 {
    if old.is_empty() {
        return 0.0;
    }
    let flips = old.iter().zip(new).filter(|(a, b)| a != b).count();
    flips as f64 / old.len() as f64
}

/// Random latent init with `N(0, 2/fan_in)` scaling.
pub fn kaiming_normal<T: Scalar, R: Rng>(rng: &mut R, dims: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid normal");
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::from_vec(dims, data).expect("length matches dims")
}

/// One score-trained masked module: frozen latent plus a trainable score
/// tensor registered in the parameter store.
pub struct BipropModule<T> {
    pub name: String,
    pub latent: Tensor<T>,
    pub scores: ParamId,
    pub prune_rate: f64,
}

/// Frozen `(mask, sign, α)` triple, one byte per bit; the container packs it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBinarized {
    pub name: String,
    pub dims: Vec<usize>,
    pub mask: Vec<u8>,
    /// 1 encodes +1, 0 encodes −1; `sign(0) = +1`.
    pub signs: Vec<u8>,
    pub alpha: f32,
}

impl FrozenBinarized {
    /// Reconstruct the effective weight tensor the module ran with.
    pub fn materialize<T: Scalar>(&self) -> Result<Tensor<T>> {
        let alpha = T::from_f64(self.alpha as f64);
        let data = self
            .mask
            .iter()
            .zip(&self.signs)
            .map(|(&m, &s)| {
                if m == 0 {
                    T::zero()
                } else if s != 0 {
                    alpha
                } else {
                    -alpha
                }
            })
            .collect();
        Tensor::from_vec(&self.dims, data)
    }

    pub fn nonzero_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

impl<T: Scalar> BipropModule<T> {
    pub fn new(
        name: impl Into<String>,
        latent: Tensor<T>,
        scores: ParamId,
        prune_rate: f64,
    ) -> Self {
        BipropModule {
            name: name.into(),
            latent,
            scores,
            prune_rate,
        }
    }

    /// Register scores drawn from the same distribution as the latent and
    /// build the module around them.
    pub fn with_random_scores<R: Rng>(
        name: impl Into<String>,
        latent: Tensor<T>,
        prune_rate: f64,
        fan_in: usize,
        rng: &mut R,
        store: &mut ParamStore<T>,
    ) -> Self {
        let name = name.into();
        let scores: Tensor<T> = kaiming_normal(rng, latent.dims(), fan_in);
        let pid = store.register(format!("{name}.scores"), scores);
        BipropModule::new(name, latent, pid, prune_rate)
    }

    /// Mask implied by the current scores.
    pub fn current_mask(&self, store: &ParamStore<T>) -> Result<Vec<u8>> {
        compute_mask(store.value(self.scores), self.prune_rate)
    }

    /// Effective weights for this step, pushed as a straight-through leaf:
    /// the node's gradient lands on the score parameter. Returns the node and
    /// the gain α used.
    pub fn forward(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<(NodeId, T)> {
        let mask = self.current_mask(store)?;
        let alpha = compute_alpha(&self.latent, &mask);
        let w_eff = materialize(&self.latent, &mask, alpha);
        Ok((tape.param_with_value(w_eff, self.scores), alpha))
    }

    /// Freeze the current mask into the binary triple.
    pub fn freeze(&self, store: &ParamStore<T>) -> Result<FrozenBinarized> {
        let mask = self.current_mask(store)?;
        let alpha = compute_alpha(&self.latent, &mask);
        let signs = self
            .latent
            .data()
            .iter()
            .map(|&w| if w < T::zero() { 0u8 } else { 1u8 })
            .collect();
        Ok(FrozenBinarized {
            name: self.name.clone(),
            dims: self.latent.dims().to_vec(),
            mask,
            signs,
            alpha: alpha.into_f64() as f32,
        })
    }
}
