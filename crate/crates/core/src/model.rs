//! Transformer encoder assembly: input projection, positional encoding,
//! encoder layers (masked multi-head attention + feed-forward, post-norm
//! residuals), task heads, parameter census, and freezing.
//!
//! Two weight modes share one structure: `dense` trains every weight
//! directly; `sbt` replaces each linear (and, for forecasting, each
//! layer-norm gain) with a score-trained masked module whose effective
//! weights are binary `±α`. Normalization policy follows the task:
//! batch norm for classification, layer norm for forecasting, none for
//! anomaly detection. Anomaly and forecasting models default to the
//! single-step attention mask; classification defaults to canonical
//! attention (dense) or fixed random Q/K/V activation masks (sbt).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionPlan, AttentionVariant};
use crate::autodiff::{NodeId, Tape};
use crate::biprop::{kaiming_normal, BipropModule, FrozenBinarized};
use crate::error::{Error, Result};
use crate::ops;
use crate::optim::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows allocated for a learnable positional table regardless of the window
/// length actually used (reference-runtime allocation convention; the census
/// and storage figures depend on it).
pub const LEARNABLE_PE_CAPACITY: usize = 1024;

pub const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Anomaly,
    Forecasting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Dense,
    Sbt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPolicy {
    Batch,
    Layer,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    Sinusoidal,
    Learnable,
}

fn default_heads() -> usize {
    2
}
fn default_layers() -> usize {
    2
}
fn default_ff() -> usize {
    256
}
fn default_prune() -> f64 {
    0.5
}
fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub mode: WeightMode,
    /// Input features per time step.
    pub m: usize,
    /// Window length.
    pub w: usize,
    /// Model width.
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_ff")]
    pub ff: usize,
    /// Class count; required for classification, ignored otherwise.
    #[serde(default)]
    pub classes: usize,
    #[serde(default = "default_prune")]
    pub prune_rate: f64,
    /// Activation prune rate for masked Q/K/V variants; defaults to
    /// `prune_rate`.
    #[serde(default)]
    pub activation_prune_rate: Option<f64>,
    /// Defaults per task/mode; see [`ModelConfig::attention_variant`].
    #[serde(default)]
    pub attention: Option<AttentionVariant>,
    #[serde(default)]
    pub norm: Option<NormPolicy>,
    #[serde(default)]
    pub positional: Option<PositionalKind>,
    /// Scale attention scores by 1/√d instead of the per-head 1/√d′.
    #[serde(default)]
    pub scale_by_full_d: bool,
    /// Classification head: pool over time before the decoder instead of
    /// decoding per step and averaging (identical for a linear head).
    #[serde(default)]
    pub pool_before_decode: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl ModelConfig {
    /// Baseline configuration for the given shape; every other field starts
    /// at its default (`classes` stays 0 and must be set for classification).
    pub fn new(task: Task, mode: WeightMode, m: usize, w: usize, d: usize) -> Self {
        ModelConfig {
            task,
            mode,
            m,
            w,
            d,
            heads: default_heads(),
            layers: default_layers(),
            ff: default_ff(),
            classes: 0,
            prune_rate: default_prune(),
            activation_prune_rate: None,
            attention: None,
            norm: None,
            positional: None,
            scale_by_full_d: false,
            pool_before_decode: false,
            seed: default_seed(),
        }
    }

    pub fn attention_variant(&self) -> AttentionVariant {
        self.attention.unwrap_or(match (self.task, self.mode) {
            (_, WeightMode::Dense) => AttentionVariant::Canonical,
            (Task::Classification, WeightMode::Sbt) => AttentionVariant::QkvRandom,
            (Task::Anomaly | Task::Forecasting, WeightMode::Sbt) => AttentionVariant::StepT,
        })
    }

    pub fn norm_policy(&self) -> NormPolicy {
        self.norm.unwrap_or(match self.task {
            Task::Classification => NormPolicy::Batch,
            Task::Forecasting => NormPolicy::Layer,
            Task::Anomaly => NormPolicy::None,
        })
    }

    pub fn positional_kind(&self) -> PositionalKind {
        self.positional.unwrap_or(
            if self.task == Task::Classification && self.mode == WeightMode::Dense {
                PositionalKind::Learnable
            } else {
                PositionalKind::Sinusoidal
            },
        )
    }

    pub fn p_a(&self) -> f64 {
        self.activation_prune_rate.unwrap_or(self.prune_rate)
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    /// Output width of the decoder: class count or reconstructed features.
    pub fn decoder_out(&self) -> usize {
        match self.task {
            Task::Classification => self.classes,
            _ => self.m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.w == 0 || self.d == 0 || self.layers == 0 || self.ff == 0 {
            return Err(Error::config("m, w, d, layers, ff must all be positive"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "model width {} not divisible by head count {}",
                self.d, self.heads
            )));
        }
        if self.task == Task::Classification && self.classes < 2 {
            return Err(Error::config(
                "classification needs at least two classes (set `classes`)",
            ));
        }
        if !(0.0..1.0).contains(&self.prune_rate) {
            return Err(Error::config(format!(
                "prune_rate {} outside [0,1)",
                self.prune_rate
            )));
        }
        if !(0.0..1.0).contains(&self.p_a()) {
            return Err(Error::config(format!(
                "activation_prune_rate {} outside [0,1)",
                self.p_a()
            )));
        }
        if self.attention_variant() == AttentionVariant::StepT && self.w < 2 {
            return Err(Error::config(
                "single-step attention needs window length >= 2",
            ));
        }
        if self.positional_kind() == PositionalKind::Learnable && self.mode == WeightMode::Sbt {
            return Err(Error::config(
                "sbt models use the fixed sinusoidal positional encoding",
            ));
        }
        Ok(())
    }
}

enum Linear<T: Scalar> {
    Dense { w: ParamId, b: ParamId },
    Masked(BipropModule<T>),
}

impl<T: Scalar> Linear<T> {
    fn dense(
        name: &str,
        out: usize,
        inp: usize,
        rng: &mut ChaCha8Rng,
        store: &mut ParamStore<T>,
    ) -> Self {
        let w = store.register(
            format!("{name}.weight"),
            kaiming_normal(rng, &[out, inp], inp),
        );
        let b = store.register(format!("{name}.bias"), Tensor::zeros(&[out]));
        Linear::Dense { w, b }
    }

    fn masked(
        name: &str,
        out: usize,
        inp: usize,
        p: f64,
        rng: &mut ChaCha8Rng,
        store: &mut ParamStore<T>,
    ) -> Self {
        let latent = kaiming_normal(rng, &[out, inp], inp);
        Linear::Masked(BipropModule::with_random_scores(
            name, latent, p, inp, rng, store,
        ))
    }

    /// `x·Wᵀ (+ b)` for `(…, in)` input.
    fn forward(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Linear::Dense { w, b } => {
                let wn = tape.param(store, *w);
                let bn = tape.param(store, *b);
                let y = tape.matmul_nt(x, wn)?;
                tape.add_bias(y, bn)
            }
            Linear::Masked(module) => {
                let (wn, _) = module.forward(tape, store)?;
                tape.matmul_nt(x, wn)
            }
        }
    }
}

struct BatchNormSite {
    gain: ParamId,
    bias: ParamId,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

enum NormSite<T: Scalar> {
    None,
    Batch(BatchNormSite),
    LayerDense { gain: ParamId, bias: ParamId },
    LayerMasked(BipropModule<T>),
}

impl<T: Scalar> NormSite<T> {
    fn build(
        name: &str,
        policy: NormPolicy,
        mode: WeightMode,
        task: Task,
        d: usize,
        p: f64,
        rng: &mut ChaCha8Rng,
        store: &mut ParamStore<T>,
    ) -> Self {
        match policy {
            NormPolicy::None => NormSite::None,
            NormPolicy::Batch => NormSite::Batch(BatchNormSite {
                gain: store.register(format!("{name}.gain"), Tensor::filled(&[d], T::one())),
                bias: store.register(format!("{name}.bias"), Tensor::zeros(&[d])),
                running_mean: vec![0.0; d],
                running_var: vec![1.0; d],
            }),
            NormPolicy::Layer => {
                if mode == WeightMode::Sbt && task == Task::Forecasting {
                    // Gain vector binarized like the linears; no bias.
                    let latent = Tensor::filled(&[d], T::one());
                    NormSite::LayerMasked(BipropModule::with_random_scores(
                        name, latent, p, d, rng, store,
                    ))
                } else {
                    NormSite::LayerDense {
                        gain: store
                            .register(format!("{name}.gain"), Tensor::filled(&[d], T::one())),
                        bias: store.register(format!("{name}.bias"), Tensor::zeros(&[d])),
                    }
                }
            }
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let eps = T::from_f64(NORM_EPS);
        match self {
            NormSite::None => Ok(x),
            NormSite::LayerDense { gain, bias } => {
                let g = tape.param(store, *gain);
                let b = tape.param(store, *bias);
                tape.layer_norm(x, g, Some(b), eps)
            }
            NormSite::LayerMasked(module) => {
                let (g, _) = module.forward(tape, store)?;
                tape.layer_norm(x, g, None, eps)
            }
            NormSite::Batch(site) => {
                let g = tape.param(store, site.gain);
                let b = tape.param(store, site.bias);
                if train {
                    let (y, stats) = tape.batch_norm(x, g, b, eps)?;
                    for (r, s) in site.running_mean.iter_mut().zip(&stats.mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s.into_f64();
                    }
                    for (r, s) in site.running_var.iter_mut().zip(&stats.var_unbiased) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s.into_f64();
                    }
                    Ok(y)
                } else {
                    // Affine in the running statistics; constant at eval.
                    let w = tape.value(x).dim(1);
                    let d = site.running_mean.len();
                    let gain_v = store.value(site.gain);
                    let bias_v = store.value(site.bias);
                    let mut scale = vec![T::zero(); d];
                    let mut shift = vec![T::zero(); d];
                    for c in 0..d {
                        let s = gain_v.data()[c]
                            / T::from_f64((site.running_var[c] + NORM_EPS).sqrt());
                        scale[c] = s;
                        shift[c] = bias_v.data()[c] - T::from_f64(site.running_mean[c]) * s;
                    }
                    let mut tile = Tensor::zeros(&[w, d]);
                    for r in 0..w {
                        tile.data_mut()[r * d..(r + 1) * d].copy_from_slice(&scale);
                    }
                    let scaled = tape.mul_mask(x, tile)?;
                    let shift_node = tape.constant(Tensor::from_vec(&[d], shift)?);
                    tape.add_bias(scaled, shift_node)
                }
            }
        }
    }
}

enum Positional<T: Scalar> {
    Sinusoidal(Tensor<T>),
    Learnable { table: ParamId },
}

struct EncoderLayer<T: Scalar> {
    wq: Linear<T>,
    wk: Linear<T>,
    wv: Linear<T>,
    wo: Linear<T>,
    ff1: Linear<T>,
    ff2: Linear<T>,
    norm1: NormSite<T>,
    norm2: NormSite<T>,
    plan: AttentionPlan<T>,
}

pub struct TransformerModel<T: Scalar> {
    pub config: ModelConfig,
    input_proj: Linear<T>,
    positional: Positional<T>,
    layers: Vec<EncoderLayer<T>>,
    decoder: Linear<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOpts {
    pub train: bool,
    /// Register the input as a gradient-carrying leaf.
    pub track_input_grad: bool,
}

impl ForwardOpts {
    pub fn train() -> Self {
        ForwardOpts {
            train: true,
            track_input_grad: false,
        }
    }
    pub fn eval() -> Self {
        ForwardOpts {
            train: false,
            track_input_grad: false,
        }
    }
}

pub struct ForwardOut {
    pub input: NodeId,
    /// `(batch, classes)` logits or `(batch, w, m)` reconstruction.
    pub output: NodeId,
}

/// Per-module parameter census entry.
#[derive(Debug, Clone, Serialize)]
pub struct ModuleCensus {
    pub name: String,
    pub fp32_params: usize,
    pub binary_params: usize,
    pub alpha_count: usize,
}

/// Frozen export of one module, ready for container packing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenEntry {
    Binarized(FrozenBinarized),
    Fp32 {
        name: String,
        dims: Vec<usize>,
        values: Vec<f32>,
    },
    BitMask {
        name: String,
        dims: Vec<usize>,
        bits: Vec<u8>,
    },
}

impl FrozenEntry {
    pub fn name(&self) -> &str {
        match self {
            FrozenEntry::Binarized(b) => &b.name,
            FrozenEntry::Fp32 { name, .. } => name,
            FrozenEntry::BitMask { name, .. } => name,
        }
    }
}

/// Per-sample attention validity `(batch, w)` from valid lengths.
pub fn key_valid_from_lens<T: Scalar>(lens: &[usize], w: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[lens.len(), w]);
    for (b, &len) in lens.iter().enumerate() {
        if len == 0 || len > w {
            return Err(Error::data(format!(
                "sample {b} has invalid length {len} for window {w}"
            )));
        }
        for j in 0..len {
            t.set2(b, j, T::one());
        }
    }
    Ok(t)
}

/// Per-sample averaging weights `(batch, w)`: `1/len` over valid steps.
pub fn mean_weights_from_lens<T: Scalar>(lens: &[usize], w: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[lens.len(), w]);
    for (b, &len) in lens.iter().enumerate() {
        if len == 0 || len > w {
            return Err(Error::data(format!(
                "sample {b} has invalid length {len} for window {w}"
            )));
        }
        let inv = T::from_f64(1.0 / len as f64);
        for j in 0..len {
            t.set2(b, j, inv);
        }
    }
    Ok(t)
}

impl<T: Scalar> TransformerModel<T> {
    /// Build a model with freshly initialized parameters registered in
    /// `store`. All randomness comes from `config.seed`.
    pub fn build(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (m, w, d, ff) = (config.m, config.w, config.d, config.ff);
        let p = config.prune_rate;
        let variant = config.attention_variant();
        let policy = config.norm_policy();

        let mk_linear = |name: &str,
                         out: usize,
                         inp: usize,
                         rng: &mut ChaCha8Rng,
                         store: &mut ParamStore<T>| {
            match config.mode {
                WeightMode::Dense => Linear::dense(name, out, inp, rng, store),
                WeightMode::Sbt => Linear::masked(name, out, inp, p, rng, store),
            }
        };

        let input_proj = mk_linear("input_proj", d, m, &mut rng, store);
        let positional = match config.positional_kind() {
            PositionalKind::Sinusoidal => Positional::Sinusoidal(ops::sinusoidal_encoding(w, d)),
            PositionalKind::Learnable => {
                let rows = LEARNABLE_PE_CAPACITY.max(w);
                // Small-uniform init.
                let mut table = Tensor::zeros(&[rows, d]);
                for v in table.data_mut() {
                    *v = T::from_f64((rand::Rng::gen::<f64>(&mut rng) * 2.0 - 1.0) * 0.02);
                }
                Positional::Learnable {
                    table: store.register("pos_table", table),
                }
            }
        };

        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let lp = format!("layer{i}");
            let wq = mk_linear(&format!("{lp}.attn.wq"), d, d, &mut rng, store);
            let wk = mk_linear(&format!("{lp}.attn.wk"), d, d, &mut rng, store);
            let wv = mk_linear(&format!("{lp}.attn.wv"), d, d, &mut rng, store);
            let wo = mk_linear(&format!("{lp}.attn.wo"), d, d, &mut rng, store);
            let ff1 = mk_linear(&format!("{lp}.ff1"), ff, d, &mut rng, store);
            let ff2 = mk_linear(&format!("{lp}.ff2"), d, ff, &mut rng, store);
            let norm1 = NormSite::build(
                &format!("{lp}.norm1"),
                policy,
                config.mode,
                config.task,
                d,
                p,
                &mut rng,
                store,
            );
            let norm2 = NormSite::build(
                &format!("{lp}.norm2"),
                policy,
                config.mode,
                config.task,
                d,
                p,
                &mut rng,
                store,
            );
            let plan = AttentionPlan::build(
                variant,
                config.heads,
                d,
                w,
                config.p_a(),
                config.seed.wrapping_add(101 + i as u64),
                config.scale_by_full_d,
            )?;
            layers.push(EncoderLayer {
                wq,
                wk,
                wv,
                wo,
                ff1,
                ff2,
                norm1,
                norm2,
                plan,
            });
        }

        let decoder = mk_linear("decoder", config.decoder_out(), d, &mut rng, store);
        Ok(TransformerModel {
            config,
            input_proj,
            positional,
            layers,
            decoder,
        })
    }

    /// Run a `(batch, w, m)` window batch through the encoder. `lens` gives
    /// per-sample valid lengths for padded classification data.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        lens: Option<&[usize]>,
        opts: ForwardOpts,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        if x.rank() != 3 || x.dim(1) != cfg.w || x.dim(2) != cfg.m {
            return Err(Error::shape("forward", x.dims(), &[0, cfg.w, cfg.m]));
        }
        let batch = x.dim(0);
        let input = if opts.track_input_grad {
            tape.input(x.clone())
        } else {
            tape.constant(x.clone())
        };

        let mut z = self.input_proj.forward(tape, store, input)?;
        z = match &self.positional {
            Positional::Sinusoidal(pe) => {
                let pe_node = tape.constant(pe.clone());
                tape.add_table(z, pe_node)?
            }
            Positional::Learnable { table } => {
                let full = tape.param(store, *table);
                let sliced = tape.take_rows(full, cfg.w)?;
                tape.add_table(z, sliced)?
            }
        };

        let key_valid = match lens {
            Some(lens) => {
                if lens.len() != batch {
                    return Err(Error::data(format!(
                        "{} lengths for a batch of {batch}",
                        lens.len()
                    )));
                }
                Some(key_valid_from_lens::<T>(lens, cfg.w)?)
            }
            None => None,
        };

        for layer in &mut self.layers {
            let q = layer.wq.forward(tape, store, z)?;
            let k = layer.wk.forward(tape, store, z)?;
            let v = layer.wv.forward(tape, store, z)?;
            let attn = attend(tape, &layer.plan, q, k, v, key_valid.as_ref())?;
            let proj = layer.wo.forward(tape, store, attn)?;
            let res1 = tape.add(z, proj)?;
            z = layer.norm1.forward(tape, store, res1, opts.train)?;

            let h = layer.ff1.forward(tape, store, z)?;
            let h = tape.relu(h);
            let h = layer.ff2.forward(tape, store, h)?;
            let res2 = tape.add(z, h)?;
            z = layer.norm2.forward(tape, store, res2, opts.train)?;
        }

        let output = match cfg.task {
            Task::Classification => {
                let weights = match lens {
                    Some(lens) => mean_weights_from_lens::<T>(lens, cfg.w)?,
                    None => Tensor::filled(&[batch, cfg.w], T::from_f64(1.0 / cfg.w as f64)),
                };
                if cfg.pool_before_decode {
                    let pooled = tape.mean_time_weighted(z, weights)?;
                    self.decoder.forward(tape, store, pooled)?
                } else {
                    let logits_steps = self.decoder.forward(tape, store, z)?;
                    tape.mean_time_weighted(logits_steps, weights)?
                }
            }
            Task::Anomaly | Task::Forecasting => self.decoder.forward(tape, store, z)?,
        };
        Ok(ForwardOut { input, output })
    }

    /// Every score-trained module in forward order.
    fn masked_modules(&self) -> Vec<&BipropModule<T>> {
        fn push<'a, T: Scalar>(l: &'a Linear<T>, out: &mut Vec<&'a BipropModule<T>>) {
            if let Linear::Masked(module) = l {
                out.push(module);
            }
        }
        let mut out = Vec::new();
        push(&self.input_proj, &mut out);
        for layer in &self.layers {
            push(&layer.wq, &mut out);
            push(&layer.wk, &mut out);
            push(&layer.wv, &mut out);
            push(&layer.wo, &mut out);
            push(&layer.ff1, &mut out);
            push(&layer.ff2, &mut out);
            if let NormSite::LayerMasked(module) = &layer.norm1 {
                out.push(module);
            }
            if let NormSite::LayerMasked(module) = &layer.norm2 {
                out.push(module);
            }
        }
        push(&self.decoder, &mut out);
        out
    }

    /// Names and masks of every score-trained module (for churn logging).
    pub fn current_masks(&self, store: &ParamStore<T>) -> Result<Vec<(String, Vec<u8>)>> {
        self.masked_modules()
            .into_iter()
            .map(|m| Ok((m.name.clone(), m.current_mask(store)?)))
            .collect()
    }

    /// Names and current gain values of every score-trained module.
    pub fn current_alphas(&self, store: &ParamStore<T>) -> Result<Vec<(String, f64)>> {
        self.masked_modules()
            .into_iter()
            .map(|m| {
                let mask = m.current_mask(store)?;
                Ok((
                    m.name.clone(),
                    crate::biprop::compute_alpha(&m.latent, &mask).into_f64(),
                ))
            })
            .collect()
    }

    pub fn binarized_module_count(&self) -> usize {
        self.masked_modules().len()
    }

    /// Per-module parameter census. Dense modules count FP32 weights,
    /// biases, the learnable positional table, and norm affine parameters;
    /// masked modules count latent weights as binary parameters plus one
    /// gain scalar each. Batch-norm affine stays FP32 in both modes.
    pub fn census(&self) -> Vec<ModuleCensus> {
        fn linear_census<T: Scalar>(
            name: String,
            out_dim: usize,
            in_dim: usize,
            l: &Linear<T>,
        ) -> ModuleCensus {
            match l {
                Linear::Dense { .. } => ModuleCensus {
                    name,
                    fp32_params: out_dim * in_dim + out_dim,
                    binary_params: 0,
                    alpha_count: 0,
                },
                Linear::Masked(_) => ModuleCensus {
                    name,
                    fp32_params: 0,
                    binary_params: out_dim * in_dim,
                    alpha_count: 1,
                },
            }
        }
        let mut out = Vec::new();
        let cfg = &self.config;
        out.push(linear_census(
            "input_proj".into(),
            cfg.d,
            cfg.m,
            &self.input_proj,
        ));
        if let Positional::Learnable { .. } = self.positional {
            out.push(ModuleCensus {
                name: "pos_table".into(),
                fp32_params: LEARNABLE_PE_CAPACITY.max(cfg.w) * cfg.d,
                binary_params: 0,
                alpha_count: 0,
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let lp = format!("layer{i}");
            out.push(linear_census(format!("{lp}.attn.wq"), cfg.d, cfg.d, &layer.wq));
            out.push(linear_census(format!("{lp}.attn.wk"), cfg.d, cfg.d, &layer.wk));
            out.push(linear_census(format!("{lp}.attn.wv"), cfg.d, cfg.d, &layer.wv));
            out.push(linear_census(format!("{lp}.attn.wo"), cfg.d, cfg.d, &layer.wo));
            out.push(linear_census(format!("{lp}.ff1"), cfg.ff, cfg.d, &layer.ff1));
            out.push(linear_census(format!("{lp}.ff2"), cfg.d, cfg.ff, &layer.ff2));
            for (site, name) in [(&layer.norm1, "norm1"), (&layer.norm2, "norm2")] {
                match site {
                    NormSite::None => {}
                    NormSite::Batch(_) | NormSite::LayerDense { .. } => out.push(ModuleCensus {
                        name: format!("{lp}.{name}"),
                        fp32_params: 2 * cfg.d,
                        binary_params: 0,
                        alpha_count: 0,
                    }),
                    NormSite::LayerMasked(_) => out.push(ModuleCensus {
                        name: format!("{lp}.{name}"),
                        fp32_params: 0,
                        binary_params: cfg.d,
                        alpha_count: 1,
                    }),
                }
            }
        }
        out.push(linear_census(
            "decoder".into(),
            cfg.decoder_out(),
            cfg.d,
            &self.decoder,
        ));
        out
    }

    /// Freeze every module for container packing. Masked modules emit the
    /// binary triple; dense weights, biases, norm parameters, running
    /// statistics, the applied positional slice, and fixed activation masks
    /// emit FP32 / bit-mask entries.
    pub fn freeze(&self, store: &ParamStore<T>) -> Result<Vec<FrozenEntry>> {
        let mut entries = Vec::new();
        let fp32 = |name: String, t: &Tensor<T>| FrozenEntry::Fp32 {
            name,
            dims: t.dims().to_vec(),
            values: t.data().iter().map(|v| v.into_f64() as f32).collect(),
        };
        let add_linear = |l: &Linear<T>, entries: &mut Vec<FrozenEntry>| -> Result<()> {
            match l {
                Linear::Dense { w, b } => {
                    entries.push(fp32(store.name(*w).to_string(), store.value(*w)));
                    entries.push(fp32(store.name(*b).to_string(), store.value(*b)));
                }
                Linear::Masked(module) => {
                    entries.push(FrozenEntry::Binarized(module.freeze(store)?));
                }
            }
            Ok(())
        };
        add_linear(&self.input_proj, &mut entries)?;
        if let Positional::Learnable { table } = &self.positional {
            // Only the applied (w, d) slice is stored.
            let full = store.value(*table);
            let w = self.config.w;
            let d = self.config.d;
            entries.push(FrozenEntry::Fp32 {
                name: "pos_table".into(),
                dims: vec![w, d],
                values: full.data()[..w * d]
                    .iter()
                    .map(|v| v.into_f64() as f32)
                    .collect(),
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let lp = format!("layer{i}");
            add_linear(&layer.wq, &mut entries)?;
            add_linear(&layer.wk, &mut entries)?;
            add_linear(&layer.wv, &mut entries)?;
            add_linear(&layer.wo, &mut entries)?;
            add_linear(&layer.ff1, &mut entries)?;
            add_linear(&layer.ff2, &mut entries)?;
            for (site, name) in [(&layer.norm1, "norm1"), (&layer.norm2, "norm2")] {
                match site {
                    NormSite::None => {}
                    NormSite::LayerDense { gain, bias } => {
                        entries.push(fp32(store.name(*gain).to_string(), store.value(*gain)));
                        entries.push(fp32(store.name(*bias).to_string(), store.value(*bias)));
                    }
                    NormSite::LayerMasked(module) => {
                        entries.push(FrozenEntry::Binarized(module.freeze(store)?));
                    }
                    NormSite::Batch(site) => {
                        entries.push(fp32(store.name(site.gain).to_string(), store.value(site.gain)));
                        entries.push(fp32(store.name(site.bias).to_string(), store.value(site.bias)));
                        entries.push(FrozenEntry::Fp32 {
                            name: format!("{lp}.{name}.running_mean"),
                            dims: vec![self.config.d],
                            values: site.running_mean.iter().map(|&v| v as f32).collect(),
                        });
                        entries.push(FrozenEntry::Fp32 {
                            name: format!("{lp}.{name}.running_var"),
                            dims: vec![self.config.d],
                            values: site.running_var.iter().map(|&v| v as f32).collect(),
                        });
                    }
                }
            }
            if let Some(masks) = &layer.plan.qkv_masks {
                for (mask, suffix) in masks.iter().zip(["q", "k", "v"]) {
                    entries.push(FrozenEntry::BitMask {
                        name: format!("{lp}.attn.mask_{suffix}"),
                        dims: mask.dims().to_vec(),
                        bits: mask
                            .data()
                            .iter()
                            .map(|&v| if v == T::zero() { 0u8 } else { 1u8 })
                            .collect(),
                    });
                }
            }
        }
        add_linear(&self.decoder, &mut entries)?;
        Ok(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(task: Task, mode: WeightMode) -> ModelConfig {
        ModelConfig {
            task,
            mode,
            m: 5,
            w: 6,
            d: 8,
            heads: default_heads(),
            layers: default_layers(),
            ff: 16,
            classes: if task == Task::Classification { 3 } else { 0 },
            prune_rate: 0.5,
            activation_prune_rate: None,
            attention: None,
            norm: None,
            positional: None,
            scale_by_full_d: false,
            pool_before_decode: false,
            seed: 11,
        }
    }

    fn rng_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let data = (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    #[test]
    fn output_shapes_per_task() {
        for mode in [WeightMode::Dense, WeightMode::Sbt] {
            for task in [Task::Classification, Task::Anomaly, Task::Forecasting] {
                let cfg = base_config(task, mode);
                let mut store = ParamStore::new();
                let mut model = TransformerModel::build(cfg, &mut store).unwrap();
                let x = rng_tensor(&[3, 6, 5], 1);
                let mut tape = Tape::new();
                let out = model
                    .forward(&mut tape, &store, &x, None, ForwardOpts::train())
                    .unwrap();
                let dims = tape.value(out.output).dims().to_vec();
                match task {
                    Task::Classification => assert_eq!(dims, vec![3, 3]),
                    _ => assert_eq!(dims, vec![3, 6, 5]),
                }
                assert!(tape.value(out.output).all_finite());
            }
        }
    }

    #[test]
    fn binarized_module_counts() {
        for (task, expect) in [
            (Task::Classification, 14),
            (Task::Anomaly, 14),
            (Task::Forecasting, 18),
        ] {
            let cfg = base_config(task, WeightMode::Sbt);
            let mut store = ParamStore::<f64>::new();
            let model = TransformerModel::build(cfg, &mut store).unwrap();
            assert_eq!(model.binarized_module_count(), expect, "{task:?}");
        }
        // The rule generalizes to 2 + 6N / 2 + 8N.
        let mut cfg = base_config(Task::Forecasting, WeightMode::Sbt);
        cfg.layers = 3;
        let mut store = ParamStore::<f64>::new();
        let model = TransformerModel::build(cfg, &mut store).unwrap();
        assert_eq!(model.binarized_module_count(), 2 + 8 * 3);
    }

    #[test]
    fn dense_census_counts_everything_fp32() {
        // Hand-computable config: m=5,w=6,d=8,ff=16,l=3,N=2 classification.
        let cfg = base_config(Task::Classification, WeightMode::Dense);
        let mut store = ParamStore::<f64>::new();
        let model = TransformerModel::build(cfg, &mut store).unwrap();
        let census = model.census();
        let total: usize = census.iter().map(|c| c.fp32_params).sum();
        let per_layer = 4 * (8 * 8 + 8) + (16 * 8 + 16) + (8 * 16 + 8) + 4 * 8;
        let expect = (5 * 8 + 8) + 1024 * 8 + 2 * per_layer + (3 * 8 + 3);
        assert_eq!(total, expect);
        assert!(census.iter().all(|c| c.binary_params == 0));
    }

    #[test]
    fn sbt_census_has_no_biases() {
        let cfg = base_config(Task::Anomaly, WeightMode::Sbt);
        let mut store = ParamStore::<f64>::new();
        let model = TransformerModel::build(cfg, &mut store).unwrap();
        let census = model.census();
        let binary: usize = census.iter().map(|c| c.binary_params).sum();
        let per_layer = 4 * 8 * 8 + 16 * 8 + 8 * 16;
        assert_eq!(binary, 5 * 8 + 2 * per_layer + 5 * 8);
        let fp32: usize = census.iter().map(|c| c.fp32_params).sum();
        assert_eq!(fp32, 0);
        let alphas: usize = census.iter().map(|c| c.alpha_count).sum();
        assert_eq!(alphas, 14);
    }

    #[test]
    fn fixed_seed_reproduces_forward() {
        let cfg = base_config(Task::Anomaly, WeightMode::Sbt);
        let x = rng_tensor(&[2, 6, 5], 3);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut store = ParamStore::new();
            let mut model = TransformerModel::build(cfg.clone(), &mut store).unwrap();
            let mut tape = Tape::new();
            let out = model
                .forward(&mut tape, &store, &x, None, ForwardOpts::train())
                .unwrap();
            outs.push(tape.value(out.output).data().to_vec());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn head_variants_agree_for_linear_decoder() {
        // Project-then-average equals pool-then-project.
        let mut cfg = base_config(Task::Classification, WeightMode::Dense);
        let x = rng_tensor(&[3, 6, 5], 9);
        let run = |cfg: ModelConfig| {
            let mut store = ParamStore::new();
            let mut model = TransformerModel::build(cfg, &mut store).unwrap();
            let mut tape = Tape::new();
            let out = model
                .forward(&mut tape, &store, &x, Some(&[6, 4, 2]), ForwardOpts::eval())
                .unwrap();
            tape.value(out.output).data().to_vec()
        };
        let a = run(cfg.clone());
        cfg.pool_before_decode = true;
        let b = run(cfg);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn padded_steps_do_not_change_logits() {
        // Identical valid prefixes with different padding content must give
        // identical logits (keys masked, averaging masked; batch norm off in
        // eval mode uses running stats so padding only entered training
        // statistics).
        let cfg = base_config(Task::Classification, WeightMode::Dense);
        let mut store = ParamStore::new();
        let mut model = TransformerModel::build(cfg, &mut store).unwrap();
        let mut a = rng_tensor(&[1, 6, 5], 13);
        let mut b = a.clone();
        for t in 3..6 {
            for j in 0..5 {
                a.set3(0, t, j, 9.0);
                b.set3(0, t, j, -9.0);
            }
        }
        let run = |model: &mut TransformerModel<f64>, x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let out = model
                .forward(&mut tape, &store, x, Some(&[3]), ForwardOpts::eval())
                .unwrap();
            tape.value(out.output).data().to_vec()
        };
        let la = run(&mut model, &a);
        let lb = run(&mut model, &b);
        for (x, y) in la.iter().zip(&lb) {
            assert!((x - y).abs() < 1e-9, "{la:?} vs {lb:?}");
        }
    }

    #[test]
    fn all_padding_sample_is_rejected() {
        let cfg = base_config(Task::Classification, WeightMode::Dense);
        let mut store = ParamStore::new();
        let mut model = TransformerModel::build(cfg, &mut store).unwrap();
        let x = rng_tensor(&[1, 6, 5], 17);
        let mut tape = Tape::new();
        assert!(model
            .forward(&mut tape, &store, &x, Some(&[0]), ForwardOpts::eval())
            .is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = base_config(Task::Classification, WeightMode::Dense);
        cfg.heads = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = base_config(Task::Classification, WeightMode::Dense);
        cfg.classes = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config(Task::Anomaly, WeightMode::Sbt);
        cfg.w = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config(Task::Classification, WeightMode::Sbt);
        cfg.positional = Some(PositionalKind::Learnable);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn freeze_emits_stable_named_entries() {
        let cfg = base_config(Task::Classification, WeightMode::Sbt);
        let mut store = ParamStore::<f64>::new();
        let model = TransformerModel::build(cfg, &mut store).unwrap();
        let entries = model.freeze(&store).unwrap();
        let names: Vec<&str> = entries.iter().map(|e| e.name()).collect();
        assert!(names.contains(&"input_proj"));
        assert!(names.contains(&"layer0.attn.mask_q"));
        assert!(names.contains(&"layer1.norm2.running_var"));
        assert!(names.contains(&"decoder"));
        let binarized = entries
            .iter()
            .filter(|e| matches!(e, FrozenEntry::Binarized(_)))
            .count();
        assert_eq!(binarized, 14);
    }
}
