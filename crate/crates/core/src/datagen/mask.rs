use super::raster::IndexStack;
use crate::error::{invalid, Result};

/// Pixels kept by the temporal-variance filter.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMask {
    /// Row-major; `true` means kept.
    pub keep: Vec<bool>,
    pub threshold: f64,
    pub fraction_masked: f64,
}

/// Linear-interpolation percentile of already sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Keeps pixels whose temporal standard deviation is non-zero and at least
/// the `percentile`-th percentile of all per-pixel deviations.
pub fn variance_mask(stack: &IndexStack, percentile_threshold: f64) -> Result<VarianceMask> {
    if stack.dates < 2 {
        return Err(invalid("variance mask needs at least two dates"));
    }
    if !(0.0..=100.0).contains(&percentile_threshold) {
        return Err(invalid(format!("percentile must lie in [0, 100], got {percentile_threshold}")));
    }
    let pixels = stack.height * stack.width;
    if pixels == 0 || stack.values.len() != stack.dates * pixels {
        return Err(invalid("index stack buffer does not match its dimensions"));
    }
    let t = stack.dates as f64;
    let stds: Vec<f64> = (0..pixels)
        .map(|p| {
            let series = (0..stack.dates).map(|d| stack.values[d * pixels + p] as f64);
            let mean = series.clone().sum::<f64>() / t;
            (series.map(|v| (v - mean).powi(2)).sum::<f64>() / t).sqrt()
        })
        .collect();
    let mut sorted = stds.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = percentile(&sorted, percentile_threshold);
    let keep: Vec<bool> = stds.iter().map(|&s| s > 0.0 && s >= threshold).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    Ok(VarianceMask {
        keep,
        threshold,
        fraction_masked: 1.0 - kept as f64 / pixels as f64,
    })
}
