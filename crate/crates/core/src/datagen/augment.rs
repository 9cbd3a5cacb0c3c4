use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seed::rng_for;

/// How the two training views of a sample are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AugmentationPolicy {
    /// Flattened `channels × size × size` patches.
    Patch {
        channels: usize,
        size: usize,
        rotate90: bool,
        mirror: bool,
        /// Area fraction range of the random crop, resized back with
        /// nearest-neighbour sampling.
        resized_crop: Option<(f64, f64)>,
    },
    Vector { noise_sigma: f64, dropout: f64 },
    None,
}

impl AugmentationPolicy {
    pub fn patch_default(channels: usize, size: usize) -> Self {
        AugmentationPolicy::Patch {
            channels,
            size,
            rotate90: true,
            mirror: true,
            resized_crop: Some((0.7, 1.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentationPolicy::Patch { channels, size, resized_crop, .. } => {
                if channels == 0 || size == 0 {
                    return Err(invalid("patch policy needs positive channels and size"));
                }
                if let Some((lo, hi)) = resized_crop {
                    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                        return Err(invalid(format!("crop scale range ({lo}, {hi}) must lie in (0, 1]")));
                    }
                }
            }
            AugmentationPolicy::Vector { noise_sigma, dropout } => {
                if !(noise_sigma >= 0.0) {
                    return Err(invalid(format!("noise sigma must be non-negative, got {noise_sigma}")));
                }
                if !(0.0..1.0).contains(&dropout) {
                    return Err(invalid(format!("dropout rate must lie in [0, 1), got {dropout}")));
                }
            }
            AugmentationPolicy::None => {}
        }
        Ok(())
    }

    fn expected_len(&self) -> Option<usize> {
        match *self {
            AugmentationPolicy::Patch { channels, size, .. } => Some(channels * size * size),
            _ => None,
        }
    }
}

/// Rotates each channel of a flattened square patch by 90° counter-clockwise.
pub fn rotate90(patch: &[f32], channels: usize, size: usize) -> Vec<f32> {
    let mut out = vec![0f32; patch.len()];
    let plane = size * size;
    for c in 0..channels {
        for i in 0..size {
            for j in 0..size {
                out[c * plane + i * size + j] = patch[c * plane + j * size + (size - 1 - i)];
            }
        }
    }
    out
}

/// Horizontal flip of each channel.
pub fn mirror(patch: &[f32], channels: usize, size: usize) -> Vec<f32> {
    let mut out = vec![0f32; patch.len()];
    let plane = size * size;
    for c in 0..channels {
        for i in 0..size {
            for j in 0..size {
                out[c * plane + i * size + j] = patch[c * plane + i * size + (size - 1 - j)];
            }
        }
    }
    out
}

/// Crops the `side × side` window at `(top, left)` and resizes it back to
/// `size × size` with nearest-neighbour sampling.
pub fn resized_crop(patch: &[f32], channels: usize, size: usize, top: usize, left: usize, side: usize) -> Vec<f32> {
    let mut out = vec![0f32; patch.len()];
    let plane = size * size;
    for c in 0..channels {
        for i in 0..size {
            let si = top + i * side / size;
            for j in 0..size {
                let sj = left + j * side / size;
                out[c * plane + i * size + j] = patch[c * plane + si * size + sj];
            }
        }
    }
    out
}

fn augment(sample: &[f32], policy: &AugmentationPolicy, rng: &mut impl Rng) -> Vec<f32> {
    match *policy {
        AugmentationPolicy::None => sample.to_vec(),
        AugmentationPolicy::Vector { noise_sigma, dropout } => {
            let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
            sample
                .iter()
                .map(|&x| {
                    let e: f64 = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                    let drop = dropout > 0.0 && rng.random::<f64>() < dropout;
                    if drop {
                        0.0
                    } else {
                        (x as f64 + e) as f32
                    }
                })
                .collect()
        }
        AugmentationPolicy::Patch { channels, size, rotate90: rot, mirror: flip, resized_crop: crop } => {
            let mut out = sample.to_vec();
            if let Some((lo, hi)) = crop {
                let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let side = ((scale.sqrt() * size as f64).round() as usize).clamp(1, size);
                let top = rng.random_range(0..=size - side);
                let left = rng.random_range(0..=size - side);
                out = resized_crop(&out, channels, size, top, left, side);
            }
            if rot {
                for _ in 0..rng.random_range(0..4) {
                    out = rotate90(&out, channels, size);
                }
            }
            if flip && rng.random::<bool>() {
                out = mirror(&out, channels, size);
            }
            out
        }
    }
}

/// Two independent augmentations of one sample; a pure function of
/// `(sample, policy, seed)`.
pub fn two_views(sample: &[f32], policy: &AugmentationPolicy, seed: u64) -> Result<(Vec<f32>, Vec<f32>)> {
    policy.validate()?;
    if let Some(len) = policy.expected_len() {
        if sample.len() != len {
            return Err(invalid(format!("patch policy expects {len} values, sample has {}", sample.len())));
        }
    }
    let mut rng = rng_for(seed, &[0x2715]);
    let s = augment(sample, policy, &mut rng);
    let t = augment(sample, policy, &mut rng);
    Ok((s, t))
}
