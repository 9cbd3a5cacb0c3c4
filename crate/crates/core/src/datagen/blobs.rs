use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::rng_for;

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Feature matrix with one integer class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    /// `n × d`.
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl VectorDataset {
    pub fn new(features: Array2<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(invalid("dataset must contain at least one sample"));
        }
        if labels.len() != features.nrows() {
            return Err(invalid(format!("{} labels for {} samples", labels.len(), features.nrows())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(invalid(format!("label {l} out of range for {class_count} classes")));
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_proportions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.class_count];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts.into_iter().map(|c| c as f64 / self.len() as f64).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let features = self.features.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self { features, labels, class_count: self.class_count }
    }

    /// Random split into `(train, test)` with `test_count` test rows.
    pub fn split(&self, test_count: usize, seed: u64) -> Result<(Self, Self)> {
        if test_count == 0 || test_count >= self.len() {
            return Err(invalid(format!("cannot hold out {test_count} of {} samples", self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_for(seed, &[0x5917]));
        let (test, train) = order.split_at(test_count);
        Ok((self.subset(train), self.subset(test)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub class_count: usize,
    pub dim: usize,
    pub proportions: Vec<f64>,
    pub center_separation: f64,
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Splits `total` into integer counts proportional to `weights` using
/// largest-remainder rounding (ties go to the lower index).
pub fn largest_remainder_counts(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Rejection-samples `count` points in a cube so that every pair is at least
/// `separation` apart. `draw` proposes a candidate.
pub fn place_centers<R: Rng>(
    count: usize,
    separation: f64,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Array1<f64>,
) -> Result<Vec<Array1<f64>>> {
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let candidate = draw(rng);
            let ok = centers.iter().all(|c| {
                let d = c - &candidate;
                d.dot(&d).sqrt() >= separation
            });
            if ok {
                centers.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidInput(format!(
                "could not place center {k} at separation {separation} after {PLACEMENT_ATTEMPTS} attempts"
            )));
        }
    }
    Ok(centers)
}

/// Isotropic Gaussian blobs with `round(w_k·n)` samples per class.
pub fn gen_blobs(config: &BlobConfig) -> Result<VectorDataset> {
    let BlobConfig { class_count, dim, ref proportions, center_separation, sigma, samples, seed } = *config;
    if class_count == 0 || dim == 0 || samples == 0 {
        return Err(invalid("blob class count, dimension and sample count must be positive"));
    }
    if proportions.len() != class_count {
        return Err(invalid(format!("{} proportions for {class_count} classes", proportions.len())));
    }
    if proportions.iter().any(|p| !p.is_finite() || *p < 0.0) || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("blob proportions are not a distribution: {proportions:?}")));
    }
    if !(sigma >= 0.0) || !(center_separation >= 0.0) {
        return Err(invalid("sigma and separation must be non-negative"));
    }

    let mut rng = rng_for(seed, &[0xB10B]);
    let half_width = center_separation.max(1.0) * class_count as f64;
    let centers = place_centers(class_count, center_separation, &mut rng, |r| {
        (0..dim).map(|_| r.random_range(-half_width..=half_width)).collect()
    })?;

    let counts = largest_remainder_counts(proportions, samples);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect();
    labels.shuffle(&mut rng);

    let noise = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    let mut features = Array2::<f32>::zeros((samples, dim));
    for (mut row, &label) in features.rows_mut().into_iter().zip(&labels) {
        for (x, c) in row.iter_mut().zip(centers[label].iter()) {
            let e: f64 = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *x = (c + e) as f32;
        }
    }
    VectorDataset::new(features, labels, class_count)
}
