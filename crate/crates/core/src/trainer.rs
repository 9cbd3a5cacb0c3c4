//! The training loop: per-epoch bags, two augmented views per sample,
//! proportion-constrained codes, swapped prediction and plain SGD with weight
//! decay under a warmup + cosine learning-rate schedule. Also the checkpoint
//! format.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagging::{make_epoch_bags, PriorMode, ProportionPrior};
use crate::datagen::io::{read_header, Reader};
use crate::datagen::{two_views, AugmentationPolicy, SampleSource};
use crate::error::{invalid, mismatch, Error, Result};
use crate::loss::{predicted_proportions, swap_loss, SwapLossResult, SwapParams};
use crate::model::{backward, encode, prototype_scores, Gradients, ModelConfig, ModelState, Precision};
use crate::ot::{matrix_entropy, max_feasible_entropy, MarginalSpec};
use crate::seed::derive_seed;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LLPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// An epoch whose least-entropic code plan is still within this fraction of
/// the maximum feasible entropy is flagged as collapsed.
pub const COLLAPSE_ENTROPY_TOL: f64 = 0.01;

const VIEW_STREAM: u64 = 0x5EED_0F_0A;
const BAG_STREAM: u64 = 0xBA_65;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub bag_size: usize,
    pub samples_per_epoch: usize,
    #[serde(default = "defaults::lr_init")]
    pub lr_init: f64,
    #[serde(default = "defaults::lr_final")]
    pub lr_final: f64,
    #[serde(default = "defaults::warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::sinkhorn_iters")]
    pub sinkhorn_iters: usize,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::freeze_prototypes_epochs")]
    pub freeze_prototypes_epochs: usize,
    #[serde(default)]
    pub hard_codes: bool,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn lr_init() -> f64 {
        0.1
    }
    pub fn lr_final() -> f64 {
        1e-4
    }
    pub fn warmup_epochs() -> usize {
        5
    }
    pub fn weight_decay() -> f64 {
        1e-6
    }
    pub fn epsilon() -> f64 {
        0.05
    }
    pub fn sinkhorn_iters() -> usize {
        5
    }
    pub fn temperature() -> f64 {
        0.1
    }
    pub fn freeze_prototypes_epochs() -> usize {
        1
    }
}

impl TrainConfig {
    /// Default optimiser settings for the given run shape.
    pub fn new(epochs: usize, bag_size: usize, samples_per_epoch: usize, seed: u64) -> Self {
        Self {
            epochs,
            bag_size,
            samples_per_epoch,
            lr_init: defaults::lr_init(),
            lr_final: defaults::lr_final(),
            warmup_epochs: defaults::warmup_epochs(),
            weight_decay: defaults::weight_decay(),
            epsilon: defaults::epsilon(),
            sinkhorn_iters: defaults::sinkhorn_iters(),
            temperature: defaults::temperature(),
            freeze_prototypes_epochs: defaults::freeze_prototypes_epochs(),
            hard_codes: false,
            seed,
        }
    }

    /// Learning rates may be zero (a frozen run); everything else that scales
    /// the update must be positive.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Ok(());
        }
        if self.bag_size == 0 || self.samples_per_epoch < self.bag_size {
            return Err(invalid(format!(
                "need 0 < bag_size ({}) <= samples_per_epoch ({})",
                self.bag_size, self.samples_per_epoch
            )));
        }
        for (name, v) in [("lr_init", self.lr_init), ("lr_final", self.lr_final), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [("epsilon", self.epsilon), ("temperature", self.temperature)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sinkhorn_iters == 0 {
            return Err(invalid("sinkhorn_iters must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(invalid(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch / self.bag_size.max(1)
    }

    pub fn swap_params(&self) -> SwapParams {
        SwapParams {
            epsilon: self.epsilon,
            temperature: self.temperature,
            sinkhorn_iters: self.sinkhorn_iters,
            hard: self.hard_codes,
        }
    }
}

/// Per-step schedule. Warmup rises linearly from `lr_init / 100` and reaches
/// `lr_init` exactly at the first post-warmup step; a cosine then decays to
/// `lr_final` at the very last step.
pub fn lr_at(config: &TrainConfig, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
    let t = (epoch * steps_per_epoch + step_in_epoch) as f64;
    let warmup = (config.warmup_epochs * steps_per_epoch) as f64;
    let total = (config.epochs * steps_per_epoch) as f64;
    let start = config.lr_init / 100.0;
    if t < warmup {
        return start + (config.lr_init - start) * t / warmup;
    }
    let span = total - warmup - 1.0;
    let p = if span > 0.0 { ((t - warmup) / span).min(1.0) } else { 0.0 };
    config.lr_final + 0.5 * (config.lr_init - config.lr_final) * (1.0 + (PI * p).cos())
}

/// Statistics of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean swap loss over the epoch's bags.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean over bags and both views of the predicted class proportions.
    pub predicted_w: Vec<f64>,
    /// The global prior, or `None` when every bag carried its own.
    pub prior_w: Option<Vec<f64>>,
    /// Per-bag priors, recorded only for exact per-bag supervision.
    #[serde(default)]
    pub bag_priors: Vec<Vec<f64>>,
    /// Mean L1 marginal residual of the code plans.
    pub residual: f64,
    /// Smallest ratio of code entropy to the maximum feasible entropy.
    pub min_entropy_ratio: f64,
    pub prototypes_frozen: bool,
}

impl EpochRecord {
    /// Every code plan of the epoch sat within [`COLLAPSE_ENTROPY_TOL`] of the
    /// maximum-entropy feasible plan.
    pub fn collapse_suspected(&self) -> bool {
        self.min_entropy_ratio >= 1.0 - COLLAPSE_ENTROPY_TOL
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// The final epoch shows near-maximum-entropy codes on every bag.
    pub fn collapse_flagged(&self) -> bool {
        self.last().is_some_and(EpochRecord::collapse_suspected)
    }
}

/// `θ ← θ − lr (g + wd θ)` for weights and (unless frozen) prototypes, and
/// `b ← b − lr g` for biases. Prototype rows are renormalised after an
/// update, then everything is rounded to the storage precision.
pub fn apply_sgd(state: &mut ModelState, grads: &Gradients, lr: f64, weight_decay: f64, update_prototypes: bool) {
    let step = |p: &mut Array2<f64>, g: &Array2<f64>| {
        p.zip_mut_with(g, |w, &dw| *w -= lr * (dw + weight_decay * *w));
    };
    for (layer, g) in state.hidden.iter_mut().zip(&grads.hidden) {
        step(&mut layer.weight, &g.weight);
        layer.bias.scaled_add(-lr, &g.bias);
    }
    step(&mut state.projection.weight, &grads.projection.weight);
    state.projection.bias.scaled_add(-lr, &grads.projection.bias);
    if update_prototypes {
        step(&mut state.prototypes, &grads.prototypes);
        state.renormalize_prototypes();
    }
    state.quantize();
}

/// Loss, parameter gradients and codes for one bag given both views.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub swap: SwapLossResult,
    pub grads: Gradients,
}

pub fn swap_step(
    state: &ModelState,
    view_s: ArrayView2<f64>,
    view_t: ArrayView2<f64>,
    marginals: &MarginalSpec,
    params: &SwapParams,
) -> Result<StepOutput> {
    let ((z_s, cache_s), (z_t, cache_t)) = match rayon::join(|| encode(state, view_s), || encode(state, view_t)) {
        (Ok(s), Ok(t)) => (s, t),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let scores_s = prototype_scores(state, &z_s)?;
    let scores_t = prototype_scores(state, &z_t)?;
    let swap = swap_loss(&scores_s, &scores_t, marginals, params)?;
    let mut grads = backward(state, &cache_s, &swap.grad_scores_s)?;
    grads.accumulate(&backward(state, &cache_t, &swap.grad_scores_t)?);
    Ok(StepOutput { swap, grads })
}

/// Both augmented views of `indices`, as `n × d` matrices.
fn bag_views(
    source: &dyn SampleSource,
    indices: &[usize],
    policy: &AugmentationPolicy,
    seed: u64,
    epoch: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = source.input_dim();
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = indices
        .par_iter()
        .map(|&i| {
            let mut buf = vec![0f32; d];
            source.write_sample(i, &mut buf);
            two_views(&buf, policy, derive_seed(seed, &[VIEW_STREAM, epoch as u64, i as u64]))
        })
        .collect::<Result<_>>()?;
    let mut s = Array2::zeros((indices.len(), d));
    let mut t = Array2::zeros((indices.len(), d));
    for (r, (a, b)) in pairs.iter().enumerate() {
        s.row_mut(r).iter_mut().zip(a).for_each(|(o, &v)| *o = v as f64);
        t.row_mut(r).iter_mut().zip(b).for_each(|(o, &v)| *o = v as f64);
    }
    Ok((s, t))
}

/// What the training loop consumes besides the model and its config.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub source: &'a dyn SampleSource,
    pub augmentation: &'a AugmentationPolicy,
    pub prior: &'a ProportionPrior,
}

pub fn train(
    model: ModelState,
    inputs: TrainInputs<'_>,
    config: &TrainConfig,
) -> Result<(ModelState, TrainTrace)> {
    train_from(model, TrainTrace::default(), inputs, config, |_, _| Ok(()))
}

/// Runs the remaining epochs after those already recorded in `trace`,
/// calling `on_epoch` after each one. Each epoch depends only on the
/// parameters entering it and on `(seed, epoch)`, so resuming from a
/// checkpoint reproduces an uninterrupted run bitwise.
pub fn train_from(
    mut model: ModelState,
    mut trace: TrainTrace,
    inputs: TrainInputs<'_>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&ModelState, &TrainTrace) -> Result<()>,
) -> Result<(ModelState, TrainTrace)> {
    config.validate()?;
    let k = model.config.cluster_count;
    let source = inputs.source;
    if trace.epochs.len() >= config.epochs {
        return Ok((model, trace));
    }
    if source.input_dim() != model.config.input_dim {
        return Err(mismatch("training samples", model.config.input_dim, source.input_dim()));
    }
    inputs.augmentation.validate()?;
    if let Some(w) = &inputs.prior.w {
        if w.len() != k {
            return Err(mismatch("prior length", k, w.len()));
        }
    }
    let labels = match inputs.prior.mode {
        PriorMode::ExactPerBag => Some(
            source
                .labels()
                .ok_or_else(|| invalid("exact per-bag priors need every training sample labelled"))?,
        ),
        _ => None,
    };
    let params = config.swap_params();

    for epoch in trace.epochs.len()..config.epochs {
        let bags = make_epoch_bags(
            source.len(),
            labels.as_deref(),
            inputs.prior,
            k,
            config.bag_size,
            config.samples_per_epoch,
            derive_seed(config.seed, &[BAG_STREAM, epoch as u64]),
        )?;
        let steps = bags.len();
        let frozen = epoch < config.freeze_prototypes_epochs;
        let mut loss_sum = 0.0;
        let mut residual_sum = 0.0;
        let mut predicted = vec![0.0; k];
        let mut prior_sum = vec![0.0; k];
        let mut bag_priors = Vec::new();
        let mut min_ratio = f64::INFINITY;
        let mut lr = 0.0;

        for (b, bag) in bags.iter().enumerate() {
            lr = lr_at(config, epoch, b, steps);
            let (view_s, view_t) = bag_views(source, &bag.indices, inputs.augmentation, config.seed, epoch)?;
            let marginals = MarginalSpec::with_uniform_columns(bag.w().to_vec(), bag.indices.len())?;
            let out = swap_step(&model, view_s.view(), view_t.view(), &marginals, &params)?;
            if !out.swap.loss.is_finite() || !out.grads.is_finite() {
                return Err(Error::NonFinite { epoch, bag: b, epsilon: config.epsilon, lr });
            }
            apply_sgd(&mut model, &out.grads, lr, config.weight_decay, !frozen);
            if !model.is_finite() {
                return Err(Error::NonFinite { epoch, bag: b, epsilon: config.epsilon, lr });
            }

            loss_sum += out.swap.loss;
            let max_h = max_feasible_entropy(marginals.row(), marginals.col());
            for (plan, probs) in [(&out.swap.codes_s, &out.swap.probs_s), (&out.swap.codes_t, &out.swap.probs_t)] {
                residual_sum += plan.residual / 2.0;
                let ratio = if max_h > 0.0 { matrix_entropy(&plan.values) / max_h } else { 1.0 };
                min_ratio = min_ratio.min(ratio);
                for (acc, p) in predicted.iter_mut().zip(predicted_proportions(probs)) {
                    *acc += p / 2.0;
                }
            }
            prior_sum.iter_mut().zip(bag.w()).for_each(|(a, w)| *a += w);
            if labels.is_some() {
                bag_priors.push(bag.w().to_vec());
            }
        }

        let steps_f = steps as f64;
        trace.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / steps_f,
            lr,
            predicted_w: predicted.iter().map(|p| p / steps_f).collect(),
            prior_w: labels.is_none().then(|| prior_sum.iter().map(|p| p / steps_f).collect()),
            bag_priors,
            residual: residual_sum / steps_f,
            min_entropy_ratio: min_ratio,
            prototypes_frozen: frozen,
        });
        on_epoch(&model, &trace)?;
    }
    Ok((model, trace))
}

/// Training config and progress stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub trace: TrainTrace,
    /// Free-form description of the run that produced the checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub training: Option<TrainingState>,
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

/// Layout: magic `LLPC`, `u32` version, model config block (input dim,
/// hidden count, hidden widths, embed dim, cluster count as `u64`; τ as
/// `f64`; precision `u8`), parameters in declaration order (`f32`, or `f64`
/// for a 64-bit model), then a `u8` flag and, if set, a `u64`-length JSON
/// block holding the training config and trace. Little-endian throughout.
pub fn encode_checkpoint(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    let model = &checkpoint.model;
    let c = &model.config;
    let mut out = Vec::with_capacity(16 + model.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut out, c.input_dim);
    put_u64(&mut out, c.hidden_dims.len());
    c.hidden_dims.iter().for_each(|&h| put_u64(&mut out, h));
    put_u64(&mut out, c.embed_dim);
    put_u64(&mut out, c.cluster_count);
    out.extend_from_slice(&c.temperature.to_le_bytes());
    match c.precision {
        Precision::F32 => {
            out.push(0);
            model.params().for_each(|&p| out.extend_from_slice(&(p as f32).to_le_bytes()));
        }
        Precision::F64 => {
            out.push(1);
            model.params().for_each(|&p| out.extend_from_slice(&p.to_le_bytes()));
        }
    }
    match &checkpoint.training {
        None => out.push(0),
        Some(training) => {
            out.push(1);
            let json = serde_json::to_vec(training).map_err(|e| Error::Format(e.to_string()))?;
            put_u64(&mut out, json.len());
            out.extend_from_slice(&json);
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    read_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let input_dim = r.usize()?;
    let hidden_count = r.usize()?;
    if hidden_count > 1024 {
        return Err(Error::Format(format!("implausible hidden layer count {hidden_count}")));
    }
    let hidden_dims = (0..hidden_count).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let embed_dim = r.usize()?;
    let cluster_count = r.usize()?;
    let temperature = r.f64()?;
    let precision = match r.u8()? {
        0 => Precision::F32,
        1 => Precision::F64,
        p => return Err(Error::Format(format!("unknown precision tag {p}"))),
    };
    let config = ModelConfig { input_dim, hidden_dims, embed_dim, cluster_count, temperature, precision };
    let mut model = ModelState::zeros(config).map_err(|e| Error::Format(format!("bad model config block: {e}")))?;
    let count = model.param_count();
    match precision {
        Precision::F32 => {
            let values = r.f32s(count)?;
            model.params_mut().zip(values).for_each(|(p, v)| *p = v as f64);
        }
        Precision::F64 => {
            for p in model.params_mut() {
                *p = r.f64()?;
            }
        }
    }
    let training = match r.u8()? {
        0 => None,
        1 => {
            let len = r.usize()?;
            let json = r.take(len)?;
            Some(serde_json::from_slice(json).map_err(|e| Error::Format(format!("training block: {e}")))?)
        }
        f => return Err(Error::Format(format!("unknown training-block flag {f}"))),
    };
    r.finish()?;
    Ok(Checkpoint { model, training })
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(checkpoint)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
