//! Training bags and the proportion priors attached to them.
//!
//! Four supervision modes are supported: exact per-bag label histograms,
//! a single global vector taken from annotations, a single global vector taken
//! from census statistics, and the equipartition baseline.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriorMode {
    ExactPerBag,
    GlobalAnnotated,
    GlobalCensus,
    Equipartition,
}

impl PriorMode {
    pub fn is_global(self) -> bool {
        matches!(self, PriorMode::GlobalAnnotated | PriorMode::GlobalCensus)
    }
}

/// Prior mode plus its proportion vector. `w` is `None` only for an
/// [`PriorMode::ExactPerBag`] setup before a bag has been drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionPrior {
    pub mode: PriorMode,
    pub w: Option<Vec<f64>>,
}

impl ProportionPrior {
    pub fn exact_per_bag() -> Self {
        Self { mode: PriorMode::ExactPerBag, w: None }
    }

    pub fn global(mode: PriorMode, w: Vec<f64>) -> Result<Self> {
        if !mode.is_global() {
            return Err(invalid(format!("{mode:?} is not a global prior mode")));
        }
        Ok(Self { mode, w: Some(check_distribution(w)?) })
    }

    pub fn equipartition(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("class count must be positive"));
        }
        Ok(Self {
            mode: PriorMode::Equipartition,
            w: Some(vec![1.0 / k as f64; k]),
        })
    }

    /// Builds the prior for `mode`, requiring `global_w` exactly when the mode
    /// is global.
    pub fn for_mode(mode: PriorMode, class_count: usize, global_w: Option<Vec<f64>>) -> Result<Self> {
        match mode {
            PriorMode::ExactPerBag => Ok(Self::exact_per_bag()),
            PriorMode::Equipartition => Self::equipartition(class_count),
            PriorMode::GlobalAnnotated | PriorMode::GlobalCensus => {
                let w = global_w.ok_or_else(|| invalid(format!("{mode:?} needs a global proportion vector")))?;
                if w.len() != class_count {
                    return Err(invalid(format!("global prior has {} entries, expected {class_count}", w.len())));
                }
                Self::global(mode, w)
            }
        }
    }
}

fn check_distribution(mut w: Vec<f64>) -> Result<Vec<f64>> {
    if w.is_empty() || w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid(format!("proportions must be finite and non-negative: {w:?}")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("proportions sum to {sum}, expected 1")));
    }
    w.iter_mut().for_each(|x| *x /= sum);
    Ok(w)
}

/// Sample indices of one bag and its concrete prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub indices: Vec<usize>,
    pub prior: ProportionPrior,
}

impl Bag {
    pub fn w(&self) -> &[f64] {
        self.prior.w.as_deref().expect("bags always carry a concrete prior")
    }
}

/// Class histogram of `indices`, normalised.
pub fn label_proportions(indices: &[usize], labels: &[usize], class_count: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; class_count];
    for &i in indices {
        let label = *labels
            .get(i)
            .ok_or_else(|| invalid(format!("sample {i} has no label")))?;
        if label >= class_count {
            return Err(invalid(format!("label {label} out of range for {class_count} classes")));
        }
        counts[label] += 1;
    }
    let n = indices.len().max(1) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Draws `samples_per_epoch` distinct samples from `0..dataset_len` and cuts
/// them into `⌊samples_per_epoch / bag_size⌋` disjoint bags. `labels` is only
/// consulted (and required) for [`PriorMode::ExactPerBag`].
pub fn make_epoch_bags(
    dataset_len: usize,
    labels: Option<&[usize]>,
    prior: &ProportionPrior,
    class_count: usize,
    bag_size: usize,
    samples_per_epoch: usize,
    seed: u64,
) -> Result<Vec<Bag>> {
    if bag_size == 0 {
        return Err(invalid("bag size must be positive"));
    }
    if samples_per_epoch > dataset_len {
        return Err(invalid(format!(
            "{samples_per_epoch} samples per epoch requested from a dataset of {dataset_len}"
        )));
    }
    if bag_size > samples_per_epoch {
        return Err(invalid(format!(
            "bag size {bag_size} exceeds the {samples_per_epoch} samples drawn per epoch"
        )));
    }
    let labels = match prior.mode {
        PriorMode::ExactPerBag => Some(labels.ok_or_else(|| invalid("exact per-bag priors need sample labels"))?),
        _ => None,
    };
    if let Some(w) = &prior.w {
        if w.len() != class_count {
            return Err(invalid(format!("prior has {} entries, expected {class_count}", w.len())));
        }
    }

    let mut rng = rng_for(seed, &[0xBA65]);
    let drawn = sample(&mut rng, dataset_len, samples_per_epoch).into_vec();
    drawn
        .chunks_exact(bag_size)
        .map(|chunk| {
            let indices = chunk.to_vec();
            let prior = match labels {
                Some(labels) => ProportionPrior {
                    mode: PriorMode::ExactPerBag,
                    w: Some(label_proportions(&indices, labels, class_count)?),
                },
                None => prior.clone(),
            };
            Ok(Bag { indices, prior })
        })
        .collect()
}

/// Turns census planted-area percentages into a prior over `target_classes`.
///
/// Target classes keep their census share verbatim; everything else,
/// including any shortfall to 100 %, folds into the trailing `others` entry.
/// If the targets alone exceed 100 % the others share is zero and the vector
/// is renormalised.
pub fn census_prior(raw: &[(String, f64)], target_classes: &[String]) -> Result<Vec<f64>> {
    let Some((last, named)) = target_classes.split_last() else {
        return Err(invalid("target class list is empty"));
    };
    if !last.eq_ignore_ascii_case("others") {
        return Err(invalid(format!("target class list must end with \"others\", got {last:?}")));
    }
    if let Some((c, p)) = raw.iter().find(|(_, p)| !p.is_finite() || *p < 0.0) {
        return Err(invalid(format!("census share for {c} is {p}")));
    }
    let mut w = Vec::with_capacity(target_classes.len());
    for class in named {
        let (_, pct) = raw
            .iter()
            .find(|(c, _)| c.eq_ignore_ascii_case(class))
            .ok_or_else(|| invalid(format!("class {class:?} missing from census data")))?;
        w.push(pct / 100.0);
    }
    let kept: f64 = w.iter().sum();
    w.push((1.0 - kept).max(0.0));
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(invalid("census prior has no mass"));
    }
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// Multiplies each proportion by its factor and renormalises.
pub fn perturb_prior(w: &[f64], factors: &[f64]) -> Result<Vec<f64>> {
    if w.len() != factors.len() {
        return Err(invalid("perturbation factors must match the prior length"));
    }
    let scaled: Vec<f64> = w.iter().zip(factors).map(|(a, f)| a * f).collect();
    let total: f64 = scaled.iter().sum();
    if !(total > 0.0) || scaled.iter().any(|x| *x < 0.0) {
        return Err(invalid("perturbed prior is not a distribution"));
    }
    Ok(scaled.into_iter().map(|x| x / total).collect())
}

/// Per-class mean and (population) standard deviation of bag proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct BagStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Monte-Carlo spread of realised bag proportions over `trials` random bags.
pub fn empirical_bag_stats(labels: &[usize], class_count: usize, bag_size: usize, trials: usize, seed: u64) -> Result<BagStats> {
    if bag_size == 0 || bag_size > labels.len() {
        return Err(invalid(format!("bag size {bag_size} invalid for {} samples", labels.len())));
    }
    if trials == 0 {
        return Err(invalid("need at least one trial"));
    }
    let mut sum = vec![0.0; class_count];
    let mut sum_sq = vec![0.0; class_count];
    for t in 0..trials {
        let mut rng = rng_for(seed, &[0x57A7, t as u64]);
        let idx = sample(&mut rng, labels.len(), bag_size).into_vec();
        let w = label_proportions(&idx, labels, class_count)?;
        for k in 0..class_count {
            sum[k] += w[k];
            sum_sq[k] += w[k] * w[k];
        }
    }
    let t = trials as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / t).collect();
    let std = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / t - m * m).max(0.0).sqrt())
        .collect();
    Ok(BagStats { mean, std })
}
