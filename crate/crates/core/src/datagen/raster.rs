use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::blobs::{largest_remainder_counts, place_centers};
use crate::error::{invalid, Error, Result};
use crate::seed::rng_for;

/// Label of pixels outside every annotated field.
pub const UNLABELED: i32 = -1;

/// Allowed gap between requested and realised class-area proportions.
pub const AREA_TOLERANCE: f64 = 0.02;

/// Multi-channel raster with a per-pixel label grid and a train/test split
/// made at field level.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRaster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major `channels × height × width`.
    pub data: Vec<f32>,
    /// Row-major `height × width`, [`UNLABELED`] or a class id.
    pub labels: Vec<i32>,
    /// True for pixels of held-out fields.
    pub test_mask: Vec<bool>,
    pub patch_size: usize,
    pub class_count: usize,
}

impl PatchRaster {
    pub fn validate(&self) -> Result<()> {
        let pixels = self.height * self.width;
        if self.patch_size % 2 == 0 || self.patch_size == 0 {
            return Err(invalid(format!("patch size must be odd, got {}", self.patch_size)));
        }
        if self.height < self.patch_size || self.width < self.patch_size {
            return Err(invalid(format!(
                "raster {}x{} is smaller than the {} patch",
                self.height, self.width, self.patch_size
            )));
        }
        if self.data.len() != self.channels * pixels || self.labels.len() != pixels || self.test_mask.len() != pixels {
            return Err(invalid("raster buffers do not match its dimensions"));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l < UNLABELED || l >= self.class_count as i32) {
            return Err(invalid(format!("label {l} out of range for {} classes", self.class_count)));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.patch_size / 2
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn label_at(&self, row: usize, col: usize) -> i32 {
        self.labels[row * self.width + col]
    }

    pub fn value(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn is_valid_center(&self, row: usize, col: usize) -> bool {
        let r = self.radius();
        row >= r && col >= r && row + r < self.height && col + r < self.width
    }

    /// Valid patch centres passing `filter`, in row-major order.
    pub fn centers(&self, filter: CenterFilter<'_>) -> Vec<(usize, usize)> {
        let r = self.radius();
        let mut out = Vec::new();
        for row in r..self.height.saturating_sub(r) {
            for col in r..self.width.saturating_sub(r) {
                let i = row * self.width + col;
                let labelled = self.labels[i] != UNLABELED;
                let keep = match filter {
                    CenterFilter::All => true,
                    CenterFilter::Labeled => labelled,
                    CenterFilter::Train => labelled && !self.test_mask[i],
                    CenterFilter::Test => labelled && self.test_mask[i],
                    CenterFilter::Mask(mask) => mask[i] && !self.test_mask[i],
                };
                if keep {
                    out.push((row, col));
                }
            }
        }
        out
    }

    /// Fraction of labelled pixels per class.
    pub fn class_area_proportions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.class_count];
        let mut total = 0usize;
        for &l in &self.labels {
            if l >= 0 {
                counts[l as usize] += 1;
                total += 1;
            }
        }
        counts.into_iter().map(|c| c as f64 / total.max(1) as f64).collect()
    }
}

/// Which patch centres to enumerate.
#[derive(Debug, Clone, Copy)]
pub enum CenterFilter<'a> {
    All,
    Labeled,
    Train,
    Test,
    /// Pixels where the mask is set, labelled or not, excluding test fields.
    Mask(&'a [bool]),
}

/// Optical-like rasters have 3 channels of a single date; SAR-like rasters
/// concatenate 2 polarisations over `dates` acquisitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SensorMode {
    Optical,
    Sar { dates: usize },
}

impl SensorMode {
    pub fn channels(self) -> usize {
        match self {
            SensorMode::Optical => 3,
            SensorMode::Sar { dates } => 2 * dates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchWorldConfig {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub field_count: usize,
    pub proportions: Vec<f64>,
    pub signature_gap: f64,
    pub texture_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_sensor")]
    pub sensor: SensorMode,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    /// Fraction of each class's fields held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Share of the grid covered by unlabelled non-crop fields.
    #[serde(default)]
    pub background_fraction: f64,
    /// Standard deviation of a per-field, per-channel offset added to the
    /// class signature (field-to-field variation within a class).
    #[serde(default)]
    pub field_sigma: f64,
}

fn default_sensor() -> SensorMode {
    SensorMode::Optical
}

fn default_patch_size() -> usize {
    21
}

fn default_test_fraction() -> f64 {
    0.5
}

impl PatchWorldConfig {
    pub fn new(height: usize, width: usize, proportions: Vec<f64>, field_count: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            class_count: proportions.len(),
            field_count,
            proportions,
            signature_gap: 1.0,
            texture_sigma: 0.3,
            seed,
            sensor: SensorMode::Optical,
            patch_size: 21,
            test_fraction: 0.5,
            background_fraction: 0.0,
            field_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    row: usize,
    col: usize,
    height: usize,
    width: usize,
}

/// Lays fields out as a slice-and-dice treemap: the field list is halved by
/// area and the rectangle cut along its longer side in proportion.
fn treemap(rect: Rect, fields: &[(usize, f64)], out: &mut Vec<(usize, Rect)>) {
    if fields.len() == 1 {
        out.push((fields[0].0, rect));
        return;
    }
    let total: f64 = fields.iter().map(|f| f.1).sum();
    let mut acc = 0.0;
    let mut split = 1;
    let mut best = f64::INFINITY;
    for (i, f) in fields.iter().enumerate().take(fields.len() - 1) {
        acc += f.1;
        let gap = (acc - total / 2.0).abs();
        if gap < best {
            best = gap;
            split = i + 1;
        }
    }
    let left: f64 = fields[..split].iter().map(|f| f.1).sum();
    let share = left / total;
    if rect.width >= rect.height {
        let cut = ((rect.width as f64 * share).round() as usize).clamp(1, rect.width.saturating_sub(1).max(1));
        treemap(Rect { width: cut, ..rect }, &fields[..split], out);
        treemap(
            Rect { col: rect.col + cut, width: rect.width - cut, ..rect },
            &fields[split..],
            out,
        );
    } else {
        let cut = ((rect.height as f64 * share).round() as usize).clamp(1, rect.height.saturating_sub(1).max(1));
        treemap(Rect { height: cut, ..rect }, &fields[..split], out);
        treemap(
            Rect { row: rect.row + cut, height: rect.height - cut, ..rect },
            &fields[split..],
            out,
        );
    }
}

/// Synthetic field mosaic: rectangular fields tiled over the grid, one class
/// per field, class-specific channel signatures plus Gaussian texture noise.
/// Realised class areas match `proportions` within 2 % or generation fails.
pub fn gen_patch_world(config: &PatchWorldConfig) -> Result<PatchRaster> {
    let k = config.class_count;
    if k == 0 || config.proportions.len() != k {
        return Err(invalid(format!("{} proportions for {k} classes", config.proportions.len())));
    }
    if config.proportions.iter().any(|p| !p.is_finite() || *p < 0.0)
        || (config.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-6
    {
        return Err(invalid(format!("raster proportions are not a distribution: {:?}", config.proportions)));
    }
    if config.field_count < k {
        return Err(invalid(format!("{} fields cannot hold {k} classes", config.field_count)));
    }
    if !(0.0..1.0).contains(&config.background_fraction) || !(0.0..1.0).contains(&config.test_fraction) {
        return Err(invalid("background and test fractions must lie in [0, 1)"));
    }
    if !(config.texture_sigma >= 0.0) || !(config.signature_gap >= 0.0) || !(config.field_sigma >= 0.0) {
        return Err(invalid("texture sigma, field sigma and signature gap must be non-negative"));
    }
    if config.patch_size % 2 == 0 || config.height < config.patch_size || config.width < config.patch_size {
        return Err(invalid("raster must be at least one odd-sized patch in each direction"));
    }
    let channels = config.sensor.channels();
    if channels == 0 {
        return Err(invalid("sensor mode yields zero channels"));
    }
    let mut rng = rng_for(config.seed, &[0xF1E1D]);

    // Area weights per pseudo-class; index k is the unlabelled background.
    let mut weights: Vec<f64> = config.proportions.iter().map(|p| p * (1.0 - config.background_fraction)).collect();
    weights.push(config.background_fraction);
    let active = weights.iter().filter(|&&w| w > 0.0).count();
    if config.field_count < active {
        return Err(invalid(format!("{} fields cannot hold {active} non-empty classes", config.field_count)));
    }
    let mut field_counts = largest_remainder_counts(&weights, config.field_count);
    for i in 0..weights.len() {
        if weights[i] > 0.0 && field_counts[i] == 0 {
            let donor = (0..weights.len())
                .filter(|&j| field_counts[j] > 1)
                .max_by_key(|&j| field_counts[j])
                .expect("field_count >= active classes");
            field_counts[donor] -= 1;
            field_counts[i] = 1;
        } else if weights[i] == 0.0 {
            field_counts[i] = 0;
        }
    }

    let area = (config.height * config.width) as f64;
    let mut fields: Vec<(usize, f64)> = Vec::new();
    let mut field_class: Vec<usize> = Vec::new();
    for (class, (&count, &w)) in field_counts.iter().zip(&weights).enumerate() {
        if count == 0 {
            continue;
        }
        let sizes: Vec<f64> = (0..count).map(|_| rng.random_range(0.6..1.4)).collect();
        let total: f64 = sizes.iter().sum();
        for s in sizes {
            fields.push((field_class.len(), w * area * s / total));
            field_class.push(class);
        }
    }
    fields.shuffle(&mut rng);
    let mut rects = Vec::with_capacity(fields.len());
    treemap(Rect { row: 0, col: 0, height: config.height, width: config.width }, &fields, &mut rects);

    // Field-level split: per class, hold out a share of its fields (at least
    // one kept for training when the class has more than one field).
    let mut is_test = vec![false; field_class.len()];
    for class in 0..k {
        let mut ids: Vec<usize> = (0..field_class.len()).filter(|&f| field_class[f] == class).collect();
        if ids.len() < 2 || config.test_fraction == 0.0 {
            continue;
        }
        ids.shuffle(&mut rng);
        let held = ((ids.len() as f64 * config.test_fraction).round() as usize).clamp(1, ids.len() - 1);
        ids.iter().take(held).for_each(|&f| is_test[f] = true);
    }

    let pixels = config.height * config.width;
    let mut labels = vec![UNLABELED; pixels];
    let mut test_mask = vec![false; pixels];
    let mut field_of = vec![0usize; pixels];
    for &(field, rect) in &rects {
        let class = field_class[field];
        let label = if class == k { UNLABELED } else { class as i32 };
        for row in rect.row..rect.row + rect.height {
            for col in rect.col..rect.col + rect.width {
                labels[row * config.width + col] = label;
                test_mask[row * config.width + col] = is_test[field];
                field_of[row * config.width + col] = field;
            }
        }
    }

    let signatures = class_signatures(config.sensor, k + 1, config.signature_gap, &mut rng)?;
    let offsets: Vec<Vec<f64>> = if config.field_sigma > 0.0 {
        let jitter = Normal::new(0.0, config.field_sigma).map_err(|e| invalid(e.to_string()))?;
        (0..field_class.len()).map(|_| (0..channels).map(|_| jitter.sample(&mut rng)).collect()).collect()
    } else {
        vec![vec![0.0; channels]; field_class.len()]
    };
    let noise = Normal::new(0.0, config.texture_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut data = vec![0f32; channels * pixels];
    for c in 0..channels {
        for p in 0..pixels {
            let class = if labels[p] == UNLABELED { k } else { labels[p] as usize };
            let e = if config.texture_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data[c * pixels + p] = (signatures[class][c] + offsets[field_of[p]][c] + e) as f32;
        }
    }

    let raster = PatchRaster {
        channels,
        height: config.height,
        width: config.width,
        data,
        labels,
        test_mask,
        patch_size: config.patch_size,
        class_count: k,
    };
    let realized = raster.class_area_proportions();
    for (class, (r, w)) in realized.iter().zip(&config.proportions).enumerate() {
        if (r - w).abs() > AREA_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "class {class} covers {r:.4} of the labelled area, requested {w:.4}; field geometry cannot meet the 2% tolerance"
            )));
        }
    }
    Ok(raster)
}

/// Per-class channel means, pairwise at least `gap` apart. SAR signatures are
/// smooth temporal profiles per polarisation.
fn class_signatures(sensor: SensorMode, count: usize, gap: f64, rng: &mut impl Rng) -> Result<Vec<Array1<f64>>> {
    let spread = gap.max(0.1) * count as f64;
    match sensor {
        SensorMode::Optical => place_centers(count, gap, rng, |r| {
            (0..3).map(|_| r.random_range(-spread..=spread)).collect()
        }),
        SensorMode::Sar { dates } => place_centers(count, gap, rng, |r| {
            let mut v = Vec::with_capacity(2 * dates);
            for _pol in 0..2 {
                let level = r.random_range(-spread..=spread);
                let amplitude = r.random_range(0.0..=spread);
                let phase = r.random_range(0.0..std::f64::consts::TAU);
                for t in 0..dates {
                    let angle = std::f64::consts::TAU * t as f64 / dates.max(1) as f64 + phase;
                    v.push(level + amplitude * angle.sin());
                }
            }
            Array1::from(v)
        }),
    }
}

/// Cuts the `patch_size × patch_size` window centred at `(row, col)`,
/// flattened channel-major, together with the centre pixel's label.
pub fn extract_patch(raster: &PatchRaster, row: usize, col: usize) -> Result<(Vec<f32>, i32)> {
    let mut out = vec![0f32; raster.patch_len()];
    write_patch(raster, row, col, &mut out)?;
    Ok((out, raster.label_at(row, col)))
}

pub(crate) fn write_patch(raster: &PatchRaster, row: usize, col: usize, out: &mut [f32]) -> Result<()> {
    if row >= raster.height || col >= raster.width || !raster.is_valid_center(row, col) {
        return Err(invalid(format!(
            "patch window at ({row}, {col}) leaves the {}x{} raster",
            raster.height, raster.width
        )));
    }
    let p = raster.patch_size;
    let r = raster.radius();
    let mut i = 0;
    for c in 0..raster.channels {
        for dr in 0..p {
            let start = (c * raster.height + row + dr - r) * raster.width + col - r;
            out[i..i + p].copy_from_slice(&raster.data[start..start + p]);
            i += p;
        }
    }
    Ok(())
}

/// `dates × height × width` vegetation-index time series.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexStack {
    pub dates: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl IndexStack {
    pub fn at(&self, t: usize, row: usize, col: usize) -> f32 {
        self.values[(t * self.height + row) * self.width + col]
    }

    /// Stores the stack as a raster (one channel per date) so it can share the
    /// dataset file format; labels are copied from `like`.
    pub fn to_raster(&self, like: &PatchRaster) -> PatchRaster {
        PatchRaster {
            channels: self.dates,
            height: self.height,
            width: self.width,
            data: self.values.clone(),
            labels: like.labels.clone(),
            test_mask: like.test_mask.clone(),
            patch_size: like.patch_size,
            class_count: like.class_count,
        }
    }

    pub fn from_raster(raster: &PatchRaster) -> Self {
        Self {
            dates: raster.channels,
            height: raster.height,
            width: raster.width,
            values: raster.data.clone(),
        }
    }
}

/// Synthetic vegetation index: crop classes follow a seasonal curve with a
/// class-specific phase, unlabelled ground stays nearly flat.
pub fn gen_index_stack(raster: &PatchRaster, dates: usize, seed: u64) -> Result<IndexStack> {
    if dates < 2 {
        return Err(invalid("an index stack needs at least two dates"));
    }
    let mut rng = rng_for(seed, &[0x1D5]);
    let phases: Vec<f64> = (0..raster.class_count)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let jitter = Normal::new(0.0, 0.02).expect("valid sigma");
    let pixels = raster.height * raster.width;
    let mut values = vec![0f32; dates * pixels];
    for t in 0..dates {
        let season = std::f64::consts::TAU * t as f64 / dates as f64;
        for p in 0..pixels {
            let base = match raster.labels[p] {
                UNLABELED => 0.3,
                class => 0.5 + 0.3 * (season + phases[class as usize]).sin(),
            };
            values[t * pixels + p] = (base + jitter.sample(&mut rng)) as f32;
        }
    }
    Ok(IndexStack { dates, height: raster.height, width: raster.width, values })
}
