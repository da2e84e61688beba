//! Acceptance suite: every load-bearing behavior checked against an
//! independent oracle — hand-built modules with known exact costs, central
//! finite differences, closed-form expectations, hand-computed detection
//! metrics, and the published size/FLOP figures. Each test prints one PASS
//! summary line (visible under `--nocapture`) and enforces its own
//! wall-clock budget where one applies.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sbt_core::artifact::{FrozenTransformer, InferMode, PackedModel};
use sbt_core::attention::{attend, AttentionPlan, AttentionVariant};
use sbt_core::biprop::{
    compute_alpha, compute_mask, kaiming_normal, keep_count, materialize, FrozenBinarized,
};
use sbt_core::costmodel::{cost_report, model_flops, FlopCounter};
use sbt_core::model::{
    ForwardOpts, ForwardOut, FrozenEntry, ModelConfig, Task, TransformerModel, WeightMode,
};
use sbt_core::pipeline::{
    evaluate_classification, load_classification_csv, make_windows, recon_batches,
    reconstruction_scores, replicate_seeds, split_tail, train_classifier, train_reconstructor,
    ClassificationData, DatasetManifest, NormStats, TrainConfig,
};
use sbt_core::presets::{PresetFile, PRESET_NAMES};
use sbt_core::synthetic::{
    ar1_noise_floor, ar1_series, injected_anomaly_scores, two_class_sinusoids,
};
use sbt_core::threshold::{
    evaluate_detection, fit_gpd, gpd_inverse_cdf, manual_threshold, pot_threshold,
};
use sbt_core::{NodeId, ParamStore, Scalar, Tape, Tensor};

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<T> {
    let n: usize = dims.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let eps: f64 = StandardNormal.sample(rng);
            T::from_f64(eps)
        })
        .collect();
    Tensor::from_vec(dims, data).unwrap()
}

#[test]
fn binarization_identities_hold_on_random_layers() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1B0);
    for case in 0..1000 {
        let out = rng.gen_range(1..=20);
        let inp = rng.gen_range(1..=20);
        let p: f64 = rng.gen_range(0.0..0.95);
        let total = out * inp;
        let latent: Tensor<f64> = kaiming_normal(&mut rng, &[out, inp], inp);
        let scores: Tensor<f64> = kaiming_normal(&mut rng, &[out, inp], inp);

        let mask = compute_mask(&scores, p).unwrap();
        let kept = mask.iter().filter(|&&m| m != 0).count();
        assert_eq!(kept, keep_count(total, p), "case {case}: survivor count");

        // Survivors must be exactly the `kept` largest-|score| entries.
        let mut kept_min = f64::INFINITY;
        let mut pruned_max = f64::NEG_INFINITY;
        for (i, &m) in mask.iter().enumerate() {
            let a = scores.data()[i].abs();
            if m != 0 {
                kept_min = kept_min.min(a);
            } else {
                pruned_max = pruned_max.max(a);
            }
        }
        if kept < total {
            assert!(
                kept_min >= pruned_max,
                "case {case}: kept |score| {kept_min} below pruned {pruned_max}"
            );
        }

        let alpha = compute_alpha(&latent, &mask);
        let (mut sum, mut cnt) = (0.0, 0usize);
        for (v, &m) in latent.data().iter().zip(&mask) {
            if m != 0 {
                sum += v.abs();
                cnt += 1;
            }
        }
        assert!(
            (alpha - sum / cnt as f64).abs() <= 1e-12,
            "case {case}: gain {alpha} vs recomputed {}",
            sum / cnt as f64
        );

        let eff = materialize(&latent, &mask, alpha);
        for ((v, &m), lat) in eff.data().iter().zip(&mask).zip(latent.data()) {
            if m == 0 {
                assert_eq!(*v, 0.0, "case {case}: pruned weight escaped");
            } else {
                let want = if *lat < 0.0 { -alpha } else { alpha };
                assert_eq!(*v, want, "case {case}: effective weight not ±gain");
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:.2?}");
    println!("PASS binarization identities: 1000 random layers in {elapsed:.2?}");
}

enum LossSpec {
    Class { lens: Vec<usize>, labels: Vec<usize> },
    Recon { targets: Tensor<f64> },
}

impl LossSpec {
    fn lens(&self) -> Option<&[usize]> {
        match self {
            LossSpec::Class { lens, .. } => Some(lens),
            LossSpec::Recon { .. } => None,
        }
    }

    fn batch(&self) -> usize {
        match self {
            LossSpec::Class { lens, .. } => lens.len(),
            LossSpec::Recon { targets } => targets.dim(0),
        }
    }

    fn node(&self, tape: &mut Tape<f64>, out: &ForwardOut, w: usize) -> NodeId {
        match self {
            LossSpec::Class { labels, .. } => {
                tape.cross_entropy(out.output, labels.clone()).unwrap()
            }
            LossSpec::Recon { targets } => {
                let last = tape.select_time(out.output, w - 1).unwrap();
                tape.mse_loss(last, targets.clone()).unwrap()
            }
        }
    }
}

/// Loss under training-mode normalization: batch-norm sites then use batch
/// statistics, which keeps the loss a pure function of inputs and parameters
/// (eval mode bakes gain/bias into constants, cutting their gradients) and
/// exercises the batch-norm backward.
fn eval_loss(
    model: &mut TransformerModel<f64>,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    spec: &LossSpec,
) -> f64 {
    let w = model.config.w;
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, store, x, spec.lens(), ForwardOpts::train())
        .unwrap();
    let loss = spec.node(&mut tape, &out, w);
    tape.value(loss).item()
}

/// One backward pass: returns the input gradient and leaves parameter
/// gradients in the store.
fn backward_grads(
    model: &mut TransformerModel<f64>,
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    spec: &LossSpec,
) -> Tensor<f64> {
    let w = model.config.w;
    let mut tape = Tape::new();
    let opts = ForwardOpts {
        train: true,
        track_input_grad: true,
    };
    let out = model
        .forward(&mut tape, store, x, spec.lens(), opts)
        .unwrap();
    let loss = spec.node(&mut tape, &out, w);
    let grads = tape.backward(loss).unwrap();
    store.zero_grads();
    tape.apply_grads(&grads, store).unwrap();
    grads
        .wrt(out.input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.dims()))
}

fn assert_grad(analytic: f64, fd: f64, what: &str) {
    let tol = 1e-4 * analytic.abs().max(fd.abs()) + 1e-7;
    assert!(
        (analytic - fd).abs() <= tol,
        "{what}: analytic {analytic:.9e} vs central difference {fd:.9e}"
    );
}

/// Finite-difference check of every input coordinate and a sampled subset of
/// each non-score parameter tensor. Score tensors are excluded: their
/// straight-through gradient is a surrogate and differs from the true
/// (zero almost everywhere) derivative by construction.
fn check_gradients(cfg: ModelConfig, spec: LossSpec, checked: &mut usize) {
    let seed = cfg.seed;
    let (w, m) = (cfg.w, cfg.m);
    let mut store = ParamStore::<f64>::new();
    let mut model = TransformerModel::build(cfg, &mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let x: Tensor<f64> = normal_tensor(&mut rng, &[spec.batch(), w, m]);

    let input_grad = backward_grads(&mut model, &mut store, &x, &spec);
    let eps = 1e-5;
    let mut xp = x.clone();
    for idx in 0..x.numel() {
        let orig = x.data()[idx];
        xp.data_mut()[idx] = orig + eps;
        let lp = eval_loss(&mut model, &store, &xp, &spec);
        xp.data_mut()[idx] = orig - eps;
        let lm = eval_loss(&mut model, &store, &xp, &spec);
        xp.data_mut()[idx] = orig;
        assert_grad(
            input_grad.data()[idx],
            (lp - lm) / (2.0 * eps),
            &format!("input[{idx}]"),
        );
        *checked += 1;
    }

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with(".scores") {
            continue;
        }
        let n = store.value(id).numel();
        let stride = (n / 8).max(1);
        for idx in (0..n).step_by(stride) {
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + eps;
            let lp = eval_loss(&mut model, &store, &x, &spec);
            store.value_mut(id).data_mut()[idx] = orig - eps;
            let lm = eval_loss(&mut model, &store, &x, &spec);
            store.value_mut(id).data_mut()[idx] = orig;
            assert_grad(
                store.grad(id).data()[idx],
                (lp - lm) / (2.0 * eps),
                &format!("{name}[{idx}]"),
            );
            *checked += 1;
        }
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9Dad);
    let mut checked = 0usize;

    // Dense classification: batch statistics, learnable positional table,
    // canonical attention, cross-entropy, padded lengths.
    let mut cfg = ModelConfig::new(Task::Classification, WeightMode::Dense, 3, 8, 16);
    cfg.classes = 3;
    cfg.ff = 12;
    cfg.seed = 2101;
    check_gradients(
        cfg,
        LossSpec::Class {
            lens: vec![8, 5],
            labels: vec![0, 2],
        },
        &mut checked,
    );

    // Dense forecasting: layer norm, reconstruction loss.
    let mut cfg = ModelConfig::new(Task::Forecasting, WeightMode::Dense, 3, 6, 12);
    cfg.ff = 12;
    cfg.seed = 2102;
    let targets: Tensor<f64> = normal_tensor(&mut rng, &[2, 3]);
    check_gradients(cfg, LossSpec::Recon { targets }, &mut checked);

    // Masked anomaly: single-step attention, no norms; frozen-mask effective
    // weights are constants, so input gradients must agree exactly.
    let mut cfg = ModelConfig::new(Task::Anomaly, WeightMode::Sbt, 3, 6, 8);
    cfg.ff = 12;
    cfg.seed = 2103;
    let targets: Tensor<f64> = normal_tensor(&mut rng, &[2, 3]);
    check_gradients(cfg, LossSpec::Recon { targets }, &mut checked);

    // Masked forecasting: masked layer-norm gains on the score path.
    let mut cfg = ModelConfig::new(Task::Forecasting, WeightMode::Sbt, 3, 6, 8);
    cfg.ff = 12;
    cfg.seed = 2104;
    let targets: Tensor<f64> = normal_tensor(&mut rng, &[2, 3]);
    check_gradients(cfg, LossSpec::Recon { targets }, &mut checked);

    // Masked classification: fixed q/k/v activation masks plus batch-norm
    // affine — the only dense-path parameters of a masked model.
    let mut cfg = ModelConfig::new(Task::Classification, WeightMode::Sbt, 3, 6, 8);
    cfg.classes = 2;
    cfg.ff = 12;
    cfg.seed = 2105;
    check_gradients(
        cfg,
        LossSpec::Class {
            lens: vec![6, 4],
            labels: vec![0, 1],
        },
        &mut checked,
    );

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:.2?}");
    println!("PASS gradient checks: {checked} coordinates across 5 configs in {elapsed:.2?}");
}

fn run_attend(
    plan: &AttentionPlan<f64>,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let qn = tape.constant(q.clone());
    let kn = tape.constant(k.clone());
    let vn = tape.constant(v.clone());
    let out = attend(&mut tape, plan, qn, kn, vn, None).unwrap();
    tape.value(out).clone()
}

#[test]
fn single_step_attention_copies_history_and_excludes_current_step() {
    for &w in &[2usize, 3, 8, 50] {
        let (heads, d) = (2, 8);
        let plan =
            AttentionPlan::<f64>::build(AttentionVariant::StepT, heads, d, w, 0.0, 7, false)
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(w as u64);
        let q: Tensor<f64> = normal_tensor(&mut rng, &[2, w, d]);
        let k: Tensor<f64> = normal_tensor(&mut rng, &[2, w, d]);
        let v: Tensor<f64> = normal_tensor(&mut rng, &[2, w, d]);
        let base = run_attend(&plan, &q, &k, &v);

        for b in 0..2 {
            for t in 0..w - 1 {
                for j in 0..d {
                    assert!(
                        (base.at3(b, t, j) - v.at3(b, t, j)).abs() <= 1e-12,
                        "w={w}: row {t} is not a value copy"
                    );
                }
            }
        }

        // Zero self-weight: shifting the current step's value row must leave
        // the current step's output bit-identical.
        let mut v_self = v.clone();
        for b in 0..2 {
            for j in 0..d {
                let cur = v_self.at3(b, w - 1, j);
                v_self.set3(b, w - 1, j, cur + 5.0);
            }
        }
        let shifted = run_attend(&plan, &q, &k, &v_self);
        for b in 0..2 {
            for j in 0..d {
                assert_eq!(
                    base.at3(b, w - 1, j),
                    shifted.at3(b, w - 1, j),
                    "w={w}: current step attends to itself"
                );
            }
        }

        // And it must genuinely read the past: shifting a past value row
        // moves the current step's output.
        let mut v_past = v.clone();
        for j in 0..d {
            let cur = v_past.at3(0, 0, j);
            v_past.set3(0, 0, j, cur + 5.0);
        }
        let moved = run_attend(&plan, &q, &k, &v_past);
        assert!(
            (0..d).any(|j| (moved.at3(0, w - 1, j) - base.at3(0, w - 1, j)).abs() > 1e-9),
            "w={w}: current step ignores the past"
        );
    }
    println!("PASS single-step attention: history copied, self excluded for w in {{2,3,8,50}}");
}

/// Binarized entry whose mask spreads survivors round-robin so every output
/// row keeps at least one weight, with all-positive signs. Feeding such a
/// model strictly positive inputs keeps every activation positive, which
/// makes the instrumented non-zero count equal the full surviving-weight
/// count — the closed form, exactly. Gains must be chosen small enough that
/// attention score spreads stay far from the exp underflow point, or softmax
/// weights would collapse to exact zeros and fall out of the count.
fn round_robin_binarized(name: &str, out: usize, inp: usize, p: f64, alpha: f32) -> FrozenEntry {
    let total = out * inp;
    let keep = keep_count(total, p);
    assert!(keep >= out, "construction needs one survivor per row");
    let (q, r) = (keep / out, keep % out);
    let mut mask = vec![0u8; total];
    for o in 0..out {
        let take = q + usize::from(o < r);
        for j in 0..take {
            mask[o * inp + j] = 1;
        }
    }
    FrozenEntry::Binarized(FrozenBinarized {
        name: name.to_string(),
        dims: vec![out, inp],
        mask,
        signs: vec![1; total],
        alpha,
    })
}

fn constant_dense(entries: &mut Vec<FrozenEntry>, name: &str, out: usize, inp: usize) {
    entries.push(FrozenEntry::Fp32 {
        name: format!("{name}.weight"),
        dims: vec![out, inp],
        values: vec![0.05; out * inp],
    });
    entries.push(FrozenEntry::Fp32 {
        name: format!("{name}.bias"),
        dims: vec![out],
        values: vec![0.1; out],
    });
}

/// Inputs far above the sinusoidal table's ±1 so positivity survives the
/// positional add.
fn positive_window(w: usize, m: usize) -> Tensor<f32> {
    let mut x = Tensor::zeros(&[1, w, m]);
    for t in 0..w {
        for j in 0..m {
            x.set3(0, t, j, 10.0 + ((t * m + j) % 7) as f32);
        }
    }
    x
}

fn assert_exact_counts(cfg: &ModelConfig, entries: Vec<FrozenEntry>) {
    let packed = PackedModel::new(cfg.clone(), entries);
    let frozen = FrozenTransformer::from_packed(&packed).unwrap();
    let x = positive_window(cfg.w, cfg.m);
    let mut counter = FlopCounter::new();
    let y = frozen.infer_counted(&x, None, &mut counter).unwrap();
    assert!(
        y.data().iter().all(|&v| v > 0.0),
        "positivity invariant broken; counts would undershoot"
    );

    let flops = model_flops(cfg).unwrap();
    let w = cfg.w as f64;
    for (name, &simplified) in &flops.components {
        // Attention projections and score/value products are already
        // per-window in the simplified convention; the rest count once per
        // sample there and ×w physically.
        let scale = if name.ends_with(".attn.proj_qkv")
            || name.ends_with(".attn.qk_t")
            || name.ends_with(".attn.av")
        {
            1.0
        } else {
            w
        };
        let got = counter.bucket(name) as f64;
        assert_eq!(
            got,
            simplified * scale,
            "{name}: counted {got} vs closed form {}",
            simplified * scale
        );
    }
    assert_eq!(
        counter.total() as f64,
        flops.physical_total - flops.extras_total,
        "bucket total vs physical closed form"
    );
}

#[test]
fn counted_flops_match_closed_forms_exactly() {
    // Masked model: exact surviving-weight counts per linear plus the
    // single-step attention counts.
    let mut cfg = ModelConfig::new(Task::Anomaly, WeightMode::Sbt, 3, 6, 8);
    cfg.ff = 16;
    let hidden_gain = 1.0 / 32.0;
    let mut entries = vec![round_robin_binarized(
        "input_proj",
        cfg.d,
        cfg.m,
        cfg.prune_rate,
        0.5,
    )];
    for i in 0..cfg.layers {
        for nm in ["wq", "wk", "wv", "wo"] {
            entries.push(round_robin_binarized(
                &format!("layer{i}.attn.{nm}"),
                cfg.d,
                cfg.d,
                cfg.prune_rate,
                hidden_gain,
            ));
        }
        entries.push(round_robin_binarized(
            &format!("layer{i}.ff1"),
            cfg.ff,
            cfg.d,
            cfg.prune_rate,
            hidden_gain,
        ));
        entries.push(round_robin_binarized(
            &format!("layer{i}.ff2"),
            cfg.d,
            cfg.ff,
            cfg.prune_rate,
            hidden_gain,
        ));
    }
    entries.push(round_robin_binarized(
        "decoder",
        cfg.m,
        cfg.d,
        cfg.prune_rate,
        0.5,
    ));
    assert_exact_counts(&cfg, entries);

    // Dense model: full out·in per linear plus canonical attention counts.
    let mut dense = ModelConfig::new(Task::Anomaly, WeightMode::Dense, 3, 6, 8);
    dense.ff = 16;
    let mut entries = Vec::new();
    constant_dense(&mut entries, "input_proj", dense.d, dense.m);
    for i in 0..dense.layers {
        for nm in ["wq", "wk", "wv", "wo"] {
            constant_dense(&mut entries, &format!("layer{i}.attn.{nm}"), dense.d, dense.d);
        }
        constant_dense(&mut entries, &format!("layer{i}.ff1"), dense.ff, dense.d);
        constant_dense(&mut entries, &format!("layer{i}.ff2"), dense.d, dense.ff);
    }
    constant_dense(&mut entries, "decoder", dense.m, dense.d);
    assert_exact_counts(&dense, entries);

    println!("PASS flop oracle: instrumented counts equal closed forms exactly (masked + dense)");
}

#[test]
fn masked_projection_attention_cost_matches_expectation() {
    let n_seeds = 20;
    let (mut counted_qk, mut counted_av) = (0.0, 0.0);
    let (mut closed_qk, mut closed_av) = (0.0, 0.0);
    for s in 0..n_seeds {
        let mut cfg = ModelConfig::new(Task::Anomaly, WeightMode::Sbt, 4, 10, 8);
        cfg.ff = 16;
        cfg.attention = Some(AttentionVariant::QkvRandom);
        cfg.seed = 4000 + s;
        let mut store = ParamStore::<f64>::new();
        let model = TransformerModel::build(cfg.clone(), &mut store).unwrap();
        let frozen =
            FrozenTransformer::from_packed(&PackedModel::new(cfg.clone(), model.freeze(&store).unwrap()))
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + s);
        let x: Tensor<f32> = normal_tensor(&mut rng, &[1, cfg.w, cfg.m]);
        let mut counter = FlopCounter::new();
        frozen.infer_counted(&x, None, &mut counter).unwrap();

        let flops = model_flops(&cfg).unwrap();
        closed_qk = 0.0;
        closed_av = 0.0;
        for i in 0..cfg.layers {
            closed_qk += flops.components[&format!("layer{i}.attn.qk_t")];
            closed_av += flops.components[&format!("layer{i}.attn.av")];
            counted_qk += counter.bucket(&format!("layer{i}.attn.qk_t")) as f64;
            counted_av += counter.bucket(&format!("layer{i}.attn.av")) as f64;
        }
    }
    let qk_mean = counted_qk / n_seeds as f64;
    let av_mean = counted_av / n_seeds as f64;
    assert!(
        (qk_mean - closed_qk).abs() <= 0.10 * closed_qk,
        "score-product mean {qk_mean} vs closed form {closed_qk}"
    );
    assert!(
        (av_mean - closed_av).abs() <= 0.10 * closed_av,
        "value-product mean {av_mean} vs closed form {closed_av}"
    );
    println!(
        "PASS masked-projection attention cost: {n_seeds}-seed means {qk_mean:.1}/{av_mean:.1} \
         vs closed {closed_qk:.0}/{closed_av:.0}"
    );
}

#[test]
fn published_size_and_flop_figures_are_reproduced() {
    let start = Instant::now();
    // Dense "Size (Bits)" column, in millions, as printed (one decimal).
    let published_bits_m = [
        ("heartbeat", 5.4),
        ("insect-wingbeats", 17.8),
        ("arabic-digits", 5.3),
        ("japanese-vowels", 2.4),
        ("face-detection", 13.3),
        ("msl", 7.2),
        ("smap", 2.4),
        ("smd", 4.2),
        ("ecl", 50.2),
        ("weather", 6.0),
        ("ettm1", 3.3),
    ];
    for (name, bits_m) in published_bits_m {
        let preset = PresetFile::load(name).unwrap();
        let report = cost_report(&preset.model).unwrap();
        let got = report.size.dense_bits / 1e6;
        assert!(
            (got - bits_m).abs() <= 0.1 + 1e-9,
            "{name}: dense bits {got:.3}M vs published {bits_m}M"
        );
        if preset.model.task == Task::Forecasting {
            assert!(
                report.size.compression_ratio >= 30.0,
                "{name}: bit ratio {:.2} below 30",
                report.size.compression_ratio
            );
        }
        if name == "smd" {
            assert!(
                (report.dense_flops.total / 19.5e6 - 1.0).abs() <= 0.15,
                "smd dense FLOPs {:.0} off 19.5M",
                report.dense_flops.total
            );
            assert!(
                (report.sbt_flops.total / 1.9e6 - 1.0).abs() <= 0.15,
                "smd binarized FLOPs {:.0} off 1.9M",
                report.sbt_flops.total
            );
            assert_eq!(report.sbt_flops.simplified_total, 1_847_332.0);
            assert_eq!(report.dense_flops.simplified_total, 19_186_352.0);
            // The simplified subtotal must arrive itemized, not as one blob.
            assert_eq!(
                report.sbt_flops.components.len(),
                2 + 5 * preset.model.layers
            );
            let item_sum: f64 = report.sbt_flops.components.values().sum();
            assert_eq!(item_sum, report.sbt_flops.simplified_total);
            for (component, flops) in &report.sbt_flops.components {
                println!("  smd {component}: {flops:.0}");
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:.2?}");
    println!("PASS published cost table: 11 presets reproduced in {elapsed:.2?}");
}

fn max_rel_gap(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() / x.abs().max(1e-6)
        })
        .fold(0.0, f64::max)
}

#[test]
fn packed_container_roundtrips_and_matches_reference_inference() {
    for (pi, name) in PRESET_NAMES.iter().enumerate() {
        let preset_start = Instant::now();
        let cfg = PresetFile::load(name).unwrap().model;
        let mut store = ParamStore::<f64>::new();
        let model = TransformerModel::build(cfg.clone(), &mut store).unwrap();
        let packed = PackedModel::new(cfg.clone(), model.freeze(&store).unwrap());

        let bytes = packed.encode().unwrap();
        let decoded = PackedModel::decode(&bytes).unwrap();
        assert_eq!(
            decoded.encode().unwrap(),
            bytes,
            "{name}: container not byte-stable across a roundtrip"
        );

        let frozen = FrozenTransformer::from_packed(&decoded).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + pi as u64);
        let mut worst: f64 = 0.0;
        for b in 0..100 {
            let x: Tensor<f32> = normal_tensor(&mut rng, &[1, cfg.w, cfg.m]);
            let lens_store;
            let lens: Option<&[usize]> = if cfg.task == Task::Classification {
                lens_store = vec![cfg.w - (b % cfg.w.min(7))];
                Some(&lens_store)
            } else {
                None
            };
            let reference = frozen.infer(&x, lens, InferMode::Reference).unwrap();
            let fast = frozen.infer(&x, lens, InferMode::Packed).unwrap();
            worst = worst.max(max_rel_gap(&reference, &fast));
        }
        assert!(
            worst <= 1e-5,
            "{name}: packed vs reference gap {worst:.3e}"
        );
        println!(
            "  {name}: 100 batches, worst relative gap {worst:.2e} in {:.2?}",
            preset_start.elapsed()
        );
    }
    println!("PASS packed equivalence: byte-stable containers, packed == reference on all presets");
}

fn sinusoid_data(n_per_class: usize, w: usize, m: usize, seed: u64) -> ClassificationData {
    let (x, labels) = two_class_sinusoids(n_per_class, w, m, 0.08, seed);
    let n = labels.len();
    ClassificationData {
        x,
        labels,
        lens: vec![w; n],
    }
}

#[test]
fn synthetic_classification_meets_accuracy_targets() {
    let start = Instant::now();
    let (w, m) = (16, 3);
    let seeds = replicate_seeds(7, 3);
    let (mut dense_train, mut dense_test, mut sbt_train, mut sbt_test) = (0.0, 0.0, 0.0, 0.0);
    for &seed in &seeds {
        let train = sinusoid_data(40, w, m, seed);
        let test = sinusoid_data(40, w, m, seed ^ 0x5EED_0001);
        for mode in [WeightMode::Dense, WeightMode::Sbt] {
            let mut cfg = ModelConfig::new(Task::Classification, mode, m, w, 16);
            cfg.classes = 2;
            cfg.ff = 32;
            cfg.seed = seed;
            let epochs = match mode {
                WeightMode::Dense => 30,
                WeightMode::Sbt => 60,
            };
            let tc = TrainConfig {
                lr: 3e-3,
                epochs,
                batch_size: 16,
                seed,
                scheduler: false,
                replicates: 1,
            };
            let mut store = ParamStore::<f64>::new();
            let mut model = TransformerModel::build(cfg, &mut store).unwrap();
            train_classifier(&mut model, &mut store, &train, &train, &tc).unwrap();
            let (train_acc, _) = evaluate_classification(&mut model, &store, &train, 64).unwrap();
            let (test_acc, _) = evaluate_classification(&mut model, &store, &test, 64).unwrap();
            match mode {
                WeightMode::Dense => {
                    dense_train += train_acc;
                    dense_test += test_acc;
                }
                WeightMode::Sbt => {
                    sbt_train += train_acc;
                    sbt_test += test_acc;
                }
            }
        }
    }
    let n = seeds.len() as f64;
    let (dense_train, dense_test) = (dense_train / n, dense_test / n);
    let (sbt_train, sbt_test) = (sbt_train / n, sbt_test / n);

    assert!(dense_train >= 0.95, "dense train accuracy {dense_train:.3}");
    assert!(sbt_train >= 0.95, "masked train accuracy {sbt_train:.3}");
    assert!(
        dense_test - sbt_test <= 0.05 + 1e-9,
        "masked test accuracy {sbt_test:.3} trails dense {dense_test:.3} by more than 5 points"
    );
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:.2?}");
    println!(
        "PASS synthetic classification: train {dense_train:.3}/{sbt_train:.3}, \
         test {dense_test:.3}/{sbt_test:.3} (dense/masked, 3-seed mean) in {elapsed:.2?}"
    );
}

#[test]
fn synthetic_forecasting_stays_near_noise_floor() {
    let start = Instant::now();
    let phis = [0.8, 0.6];
    let floor = ar1_noise_floor(&phis);
    let series = ar1_series(1400, &phis, 55);
    let stats = NormStats::fit(&series).unwrap();
    let rows = stats.apply(&series).unwrap();
    let set = make_windows(&rows, 12, 1).unwrap();
    let data = recon_batches(&set, Task::Forecasting).unwrap();
    let (train, val) = split_tail(&data, 0.2).unwrap();

    let mut mse = [0.0f64; 2];
    for (slot, mode) in [WeightMode::Dense, WeightMode::Sbt].into_iter().enumerate() {
        let mut cfg = ModelConfig::new(Task::Forecasting, mode, 2, 12, 16);
        cfg.ff = 32;
        cfg.seed = 19;
        let tc = TrainConfig {
            lr: 3e-3,
            epochs: 30,
            batch_size: 64,
            seed: 19,
            scheduler: true,
            replicates: 1,
        };
        let mut store = ParamStore::<f64>::new();
        let mut model = TransformerModel::build(cfg, &mut store).unwrap();
        train_reconstructor(&mut model, &mut store, &train, &val, &tc).unwrap();
        let scores = reconstruction_scores(&mut model, &store, &val, 256).unwrap();
        mse[slot] = scores.iter().sum::<f64>() / scores.len() as f64;
    }
    let [dense_mse, sbt_mse] = mse;

    assert!(
        sbt_mse <= 1.2 * dense_mse,
        "masked val MSE {sbt_mse:.4} more than 20% above dense {dense_mse:.4}"
    );
    assert!(
        sbt_mse <= 2.0 * floor,
        "masked val MSE {sbt_mse:.4} above twice the noise floor {floor}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:.2?}");
    println!(
        "PASS synthetic forecasting: val MSE dense {dense_mse:.4}, masked {sbt_mse:.4}, \
         noise floor {floor} in {elapsed:.2?}"
    );
}

#[test]
fn point_adjusted_metrics_match_hand_example() {
    // Two true segments [0,3) and [4,5). At τ=0.5 the predictions hit the
    // first segment (index 0) and miss the second, with one false alarm at
    // index 6. Adjustment marks all of [0,3): TP=3, FP=1, FN=1, so
    // P = R = F1 = 0.75 exactly.
    let gt = [true, true, true, false, true, false, false, false];
    let scores = [0.9, 0.1, 0.1, 0.2, 0.3, 0.2, 0.8, 0.1];
    let report = evaluate_detection(&scores, &gt, 0.5, "manual").unwrap();
    assert_eq!(report.adjusted.tp, 3);
    assert_eq!(report.adjusted.fp, 1);
    assert_eq!(report.adjusted.fn_, 1);
    assert_eq!(report.adjusted.precision, 0.75);
    assert_eq!(report.adjusted.recall, 0.75);
    assert_eq!(report.adjusted.f1, 0.75);
    assert_eq!(report.segments.len(), 2);
    assert!(report.segments[0].detected);
    assert!(!report.segments[1].detected);
    println!("PASS point adjustment: hand example gives P=R=F1=0.75 exactly");
}

#[test]
fn tail_fit_recovers_generating_parameters() {
    let (gamma, sigma) = (0.25, 2.0);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let sample: Vec<f64> = (0..10_000)
            .map(|_| gpd_inverse_cdf(rng.gen::<f64>(), gamma, sigma))
            .collect();
        let fit = fit_gpd(&sample).unwrap();
        assert!(!fit.moment_fallback);
        assert!(
            (fit.gamma - gamma).abs() <= 0.15,
            "seed {seed}: shape {:.3} vs {gamma}",
            fit.gamma
        );
        assert!(
            (fit.sigma - sigma).abs() <= 0.15 * sigma,
            "seed {seed}: scale {:.3} vs {sigma}",
            fit.sigma
        );
    }
    println!("PASS tail fit: shape within ±0.15, scale within ±15% on 10 × 10k samples");
}

#[test]
fn extrapolated_threshold_tracks_manual_rule() {
    // Calibrate both rules on a benign stream, score a stream with injected
    // anomalous runs standing 8 units above the unit-mean background.
    let (calibration, _) = injected_anomaly_scores(6000, 0, 10, 8.0, 31);
    let (scores, gt) = injected_anomaly_scores(6000, 8, 10, 8.0, 32);
    let q = 0.01;
    let manual_tau = manual_threshold(&calibration, q).unwrap();
    let pot = pot_threshold(&calibration, q, 0.98).unwrap();
    assert!(pot.fallback.is_none());

    let manual = evaluate_detection(&scores, &gt, manual_tau, "manual").unwrap();
    let extrapolated = evaluate_detection(&scores, &gt, pot.tau, "pot").unwrap();
    assert!(
        extrapolated.adjusted.f1 >= manual.adjusted.f1 - 0.05,
        "extrapolated F1 {:.3} trails manual {:.3} by more than 0.05",
        extrapolated.adjusted.f1,
        manual.adjusted.f1
    );
    println!(
        "PASS threshold selection: extrapolated F1 {:.3} (τ={:.2}) vs manual {:.3} (τ={:.2})",
        extrapolated.adjusted.f1, pot.tau, manual.adjusted.f1, manual_tau
    );
}

/// Non-gating benchmark against the real vowel dataset. Provide a directory
/// containing `japanese-vowels.toml` (a dataset manifest) via `SBT_DATA_DIR`
/// and run with `--ignored`.
#[test]
#[ignore = "needs external data; set SBT_DATA_DIR and run with --ignored"]
fn external_vowel_preset_reaches_reference_accuracy() {
    let start = Instant::now();
    let Ok(dir) = std::env::var("SBT_DATA_DIR") else {
        println!("SKIP external vowel benchmark: SBT_DATA_DIR not set");
        return;
    };
    let preset = PresetFile::load("japanese-vowels").unwrap();
    let manifest = DatasetManifest::load(&Path::new(&dir).join("japanese-vowels.toml")).unwrap();
    let label = manifest.label.as_deref().expect("manifest label column");
    let series = manifest.series.as_deref().expect("manifest series column");
    let w = preset.model.w;
    let mut train =
        load_classification_csv(&manifest.train, &manifest.features, label, series, w).unwrap();
    let test_path = manifest.test.as_ref().expect("manifest test split");
    let mut test =
        load_classification_csv(test_path, &manifest.features, label, series, w).unwrap();
    let stats = NormStats::fit_padded(&train.x, &train.lens).unwrap();
    stats.apply_padded(&mut train.x, &train.lens).unwrap();
    stats.apply_padded(&mut test.x, &test.lens).unwrap();

    let (mut dense_acc, mut sbt_acc) = (0.0, 0.0);
    let seeds = replicate_seeds(7, 3);
    for &seed in &seeds {
        for mode in [WeightMode::Dense, WeightMode::Sbt] {
            let mut cfg = preset.model.clone();
            cfg.mode = mode;
            cfg.seed = seed;
            let mut tc = preset.train.resolve(cfg.task, mode);
            tc.seed = seed;
            let mut store = ParamStore::<f64>::new();
            let mut model = TransformerModel::build(cfg, &mut store).unwrap();
            train_classifier(&mut model, &mut store, &train, &train, &tc).unwrap();
            let (acc, _) = evaluate_classification(&mut model, &store, &test, 128).unwrap();
            match mode {
                WeightMode::Dense => dense_acc += acc,
                WeightMode::Sbt => sbt_acc += acc,
            }
        }
    }
    let n = seeds.len() as f64;
    let (dense_acc, sbt_acc) = (dense_acc / n, sbt_acc / n);
    assert!(dense_acc >= 0.95, "dense test accuracy {dense_acc:.3}");
    assert!(sbt_acc >= 0.92, "masked test accuracy {sbt_acc:.3}");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1800), "took {elapsed:.2?}");
    println!(
        "PASS external vowels: dense {dense_acc:.3}, masked {sbt_acc:.3} (3-seed mean) in {elapsed:.2?}"
    );
}
