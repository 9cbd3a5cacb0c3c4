//! Swapped-prediction loss between two views, with proportion-constrained
//! codes as targets, plus the bag-level proportion diagnostics.

use ndarray::{Array2, Axis};

use crate::error::{invalid, mismatch, Result};
use crate::model::{probabilities, ProbMatrix};
use crate::ot::{harden, solve_codes, MarginalSpec, ScoreMatrix, SinkhornParams, TransportPlan};

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwapParams {
    pub epsilon: f64,
    pub temperature: f64,
    pub sinkhorn_iters: usize,
    pub hard: bool,
}

#[derive(Debug, Clone)]
pub struct SwapLossResult {
    pub loss: f64,
    /// `∂loss/∂S` for view s.
    pub grad_scores_s: Array2<f64>,
    pub grad_scores_t: Array2<f64>,
    pub codes_s: TransportPlan,
    pub codes_t: TransportPlan,
    /// Column-normalised (and possibly hardened) codes used as targets.
    pub targets_s: Array2<f64>,
    pub targets_t: Array2<f64>,
    pub probs_s: ProbMatrix,
    pub probs_t: ProbMatrix,
}

/// Rescales every column of a plan to a per-sample distribution.
pub fn column_distributions(q: &Array2<f64>) -> Array2<f64> {
    let mut c = q.clone();
    for mut col in c.columns_mut() {
        let s = col.sum();
        if s > 0.0 {
            col /= s;
        }
    }
    c
}

/// Mean over samples of `ℓ(z^s, c^t) + ℓ(z^t, c^s)` with `ℓ` the cross-entropy
/// between a code column and the softmax of the other view's scores. Codes
/// are treated as constants; the gradient for view s is `(P^s − C^t)/(τ n)`.
pub fn swap_loss(
    scores_s: &ScoreMatrix,
    scores_t: &ScoreMatrix,
    marginals: &MarginalSpec,
    params: &SwapParams,
) -> Result<SwapLossResult> {
    if !(params.epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {}", params.epsilon)));
    }
    if !(params.temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {}", params.temperature)));
    }
    if scores_s.values().dim() != scores_t.values().dim() {
        return Err(mismatch(
            "swap_loss view shapes",
            format!("{:?}", scores_s.values().dim()),
            format!("{:?}", scores_t.values().dim()),
        ));
    }
    let sinkhorn = SinkhornParams::fixed(params.epsilon, params.sinkhorn_iters);
    let codes_s = solve_codes(scores_s, marginals, &sinkhorn)?;
    let codes_t = solve_codes(scores_t, marginals, &sinkhorn)?;
    let targets = |plan: &TransportPlan| {
        if params.hard {
            column_distributions(&harden(plan))
        } else {
            column_distributions(&plan.values)
        }
    };
    let targets_s = targets(&codes_s);
    let targets_t = targets(&codes_t);
    let fixed = swap_loss_with_targets(scores_s, scores_t, &targets_s, &targets_t, params.temperature)?;

    Ok(SwapLossResult {
        loss: fixed.loss,
        grad_scores_s: fixed.grad_scores_s,
        grad_scores_t: fixed.grad_scores_t,
        codes_s,
        codes_t,
        targets_s,
        targets_t,
        probs_s: fixed.probs_s,
        probs_t: fixed.probs_t,
    })
}

/// Swap loss against given per-sample targets (`K × n`, columns summing to 1).
#[derive(Debug, Clone)]
pub struct FixedTargetLoss {
    pub loss: f64,
    pub grad_scores_s: Array2<f64>,
    pub grad_scores_t: Array2<f64>,
    pub probs_s: ProbMatrix,
    pub probs_t: ProbMatrix,
}

/// The swap loss with the targets held fixed: view s predicts `targets_t`
/// and view t predicts `targets_s`.
pub fn swap_loss_with_targets(
    scores_s: &ScoreMatrix,
    scores_t: &ScoreMatrix,
    targets_s: &Array2<f64>,
    targets_t: &Array2<f64>,
    temperature: f64,
) -> Result<FixedTargetLoss> {
    let dim = scores_s.values().dim();
    for (context, d) in [("swap targets (view s)", targets_s.dim()), ("swap targets (view t)", targets_t.dim())] {
        if d != dim {
            return Err(mismatch(context, format!("{dim:?}"), format!("{d:?}")));
        }
    }
    let probs_s = probabilities(scores_s, temperature)?;
    let probs_t = probabilities(scores_t, temperature)?;
    let n = scores_s.samples() as f64;
    let loss = (cross_entropy_sum(targets_t, probs_s.values()) + cross_entropy_sum(targets_s, probs_t.values())) / n;
    let scale = 1.0 / (temperature * n);
    let grad_scores_s = (probs_s.values() - targets_t) * scale;
    let grad_scores_t = (probs_t.values() - targets_s) * scale;
    Ok(FixedTargetLoss { loss, grad_scores_s, grad_scores_t, probs_s, probs_t })
}

/// `−Σ_j Σ_k c_kj log p_kj`, log clamped at `1e-12`.
fn cross_entropy_sum(targets: &Array2<f64>, probs: &Array2<f64>) -> f64 {
    targets
        .iter()
        .zip(probs.iter())
        .filter(|(&c, _)| c != 0.0)
        .map(|(&c, &p)| -c * p.max(LOG_CLAMP).ln())
        .sum()
}

/// Row means of a probability matrix: the bag's predicted class proportions.
pub fn predicted_proportions(probs: &ProbMatrix) -> Vec<f64> {
    probs
        .values()
        .mean_axis(Axis(1))
        .map(|m| m.to_vec())
        .unwrap_or_default()
}

/// `−Σ_k w_k log ŵ_k`; diagnostic only, never optimised.
pub fn bag_proportion_loss(predicted: &[f64], prior: &[f64]) -> Result<f64> {
    if predicted.len() != prior.len() {
        return Err(mismatch("bag_proportion_loss", prior.len(), predicted.len()));
    }
    Ok(prior
        .iter()
        .zip(predicted)
        .filter(|(&w, _)| w != 0.0)
        .map(|(&w, &p)| -w * p.max(LOG_CLAMP).ln())
        .sum())
}
