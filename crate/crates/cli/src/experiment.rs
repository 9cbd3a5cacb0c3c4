//! Turns a dataset plus a scenario block into the sample sources and prior
//! that `train` and `eval` work on.

use llpco::bagging::{census_prior, PriorMode, ProportionPrior};
use llpco::datagen::{
    gen_index_stack, variance_mask, AugmentationPolicy, CenterFilter, Dataset, PatchRaster, PatchSamples,
    SampleSource, VectorDataset, UNLABELED,
};
use llpco::seed::derive_seed;

use crate::config::{DataConfig, ExperimentConfig, Scenario, ScenarioConfig};
use crate::error::{config, Result};

const MASK_STREAM: u64 = 0x4D41_534B;

/// Dataset after class grouping and splitting.
#[derive(Debug, Clone)]
pub enum Prepared {
    Vector { train: VectorDataset, test: VectorDataset },
    Raster(PatchRaster),
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: ScenarioConfig,
    pub prepared: Prepared,
    pub class_names: Vec<String>,
}

/// Maps class ids to their position in `major`, everything else to
/// `major.len()` (the trailing `others` class).
pub fn group_classes(major: &[usize], class_count: usize) -> Result<Vec<usize>> {
    if major.is_empty() || major.len() >= class_count {
        return Err(config(format!(
            "major_classes must name between 1 and {} of the {class_count} classes",
            class_count.saturating_sub(1)
        )));
    }
    let mut map = vec![major.len(); class_count];
    for (i, &c) in major.iter().enumerate() {
        if c >= class_count {
            return Err(config(format!("major class {c} out of range for {class_count} classes")));
        }
        if map[c] != major.len() {
            return Err(config(format!("major class {c} listed twice")));
        }
        map[c] = i;
    }
    Ok(map)
}

fn regroup_vector(ds: &VectorDataset, map: &[usize], k: usize) -> VectorDataset {
    VectorDataset { labels: ds.labels.iter().map(|&l| map[l]).collect(), class_count: k, ..ds.clone() }
}

fn regroup_raster(r: &PatchRaster, map: &[usize], k: usize) -> PatchRaster {
    let labels = r.labels.iter().map(|&l| if l == UNLABELED { l } else { map[l as usize] as i32 }).collect();
    PatchRaster { labels, class_count: k, ..r.clone() }
}

fn split_vector(ds: &VectorDataset, data: &DataConfig) -> Result<(VectorDataset, VectorDataset)> {
    if !(data.test_fraction > 0.0 && data.test_fraction < 1.0) {
        return Err(config(format!("test_fraction must lie in (0, 1), got {}", data.test_fraction)));
    }
    if ds.len() < 2 {
        return Err(config("a vector dataset needs at least two samples to split"));
    }
    let test = ((ds.len() as f64 * data.test_fraction).round() as usize).clamp(1, ds.len() - 1);
    Ok(ds.split(test, data.split_seed)?)
}

impl Experiment {
    pub fn prepare(cfg: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        let scenario = cfg.scenario()?.clone();
        let kind = scenario.kind;
        let original_k = match &dataset {
            Dataset::Vector(v) => v.class_count,
            Dataset::Raster(r) => r.class_count,
        };
        let (map, k) = match &scenario.major_classes {
            Some(_) if !kind.allows_grouping() => {
                return Err(config(format!("{} trains on all classes; drop major_classes", kind.name())))
            }
            Some(major) => (Some(group_classes(major, original_k)?), major.len() + 1),
            None => (None, original_k),
        };
        if k < 2 {
            return Err(config("experiments need at least two classes"));
        }
        let prepared = match dataset {
            Dataset::Vector(v) => {
                if kind.uses_variance_mask() {
                    return Err(config("SII needs a raster dataset for its variance mask"));
                }
                let v = match &map {
                    Some(m) => regroup_vector(&v, m, k),
                    None => v,
                };
                let (train, test) = split_vector(&v, &cfg.data)?;
                Prepared::Vector { train, test }
            }
            Dataset::Raster(r) => Prepared::Raster(match &map {
                Some(m) => regroup_raster(&r, m, k),
                None => r,
            }),
        };
        let class_names = match &scenario.class_names {
            Some(names) if names.len() != k => {
                return Err(config(format!("{} class names for {k} classes", names.len())));
            }
            Some(names) => names.clone(),
            None => (0..k)
                .map(|i| if map.is_some() && i + 1 == k { "others".to_string() } else { format!("class_{i}") })
                .collect(),
        };
        Ok(Self { scenario, prepared, class_names })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_dim(&self) -> usize {
        match &self.prepared {
            Prepared::Vector { train, .. } => train.dim(),
            Prepared::Raster(r) => r.patch_len(),
        }
    }

    pub fn raster(&self) -> Option<&PatchRaster> {
        match &self.prepared {
            Prepared::Raster(r) => Some(r),
            Prepared::Vector { .. } => None,
        }
    }

    /// Keep-mask of the synthetic vegetation-index variance filter; only
    /// meaningful for rasters.
    pub fn variance_mask(&self, seed: u64) -> Result<Option<Vec<bool>>> {
        let Some(raster) = self.raster() else { return Ok(None) };
        let stack = gen_index_stack(raster, self.scenario.index_dates, derive_seed(seed, &[MASK_STREAM]))?;
        Ok(Some(variance_mask(&stack, self.scenario.mask_percentile)?.keep))
    }

    /// Samples the scenario trains on. `mask` is required for SII rasters.
    pub fn train_source<'a>(&'a self, mask: Option<&'a [bool]>) -> Result<Box<dyn SampleSource + 'a>> {
        let source: Box<dyn SampleSource + 'a> = match &self.prepared {
            Prepared::Vector { train, .. } => Box::new(train.clone()),
            Prepared::Raster(r) => {
                let filter = match (self.scenario.kind.uses_variance_mask(), mask) {
                    (true, Some(m)) => CenterFilter::Mask(m),
                    (true, None) => return Err(config("SII training needs the variance mask")),
                    (false, _) => CenterFilter::Train,
                };
                Box::new(PatchSamples::new(r, r.centers(filter))?)
            }
        };
        if source.is_empty() {
            return Err(config(format!("{} has no training samples", self.scenario.kind.name())));
        }
        if self.scenario.kind.prior_mode() == PriorMode::ExactPerBag && source.labels().is_none() {
            return Err(config("SIII needs a label for every training sample"));
        }
        Ok(source)
    }

    /// Labelled training samples, the kNN reference set.
    pub fn labelled_train<'a>(&'a self) -> Result<Box<dyn SampleSource + 'a>> {
        Ok(match &self.prepared {
            Prepared::Vector { train, .. } => Box::new(train.clone()),
            Prepared::Raster(r) => Box::new(PatchSamples::new(r, r.centers(CenterFilter::Train))?),
        })
    }

    pub fn test_source<'a>(&'a self) -> Result<Box<dyn SampleSource + 'a>> {
        let source: Box<dyn SampleSource + 'a> = match &self.prepared {
            Prepared::Vector { test, .. } => Box::new(test.clone()),
            Prepared::Raster(r) => Box::new(PatchSamples::new(r, r.centers(CenterFilter::Test))?),
        };
        if source.is_empty() {
            return Err(config("the dataset has no labelled test samples"));
        }
        Ok(source)
    }

    /// Class proportions of the annotated data: the training split for
    /// vectors, all labelled pixels for rasters.
    pub fn annotated_proportions(&self) -> Vec<f64> {
        match &self.prepared {
            Prepared::Vector { train, .. } => train.class_proportions(),
            Prepared::Raster(r) => r.class_area_proportions(),
        }
    }

    /// The scenario's prior setup.
    pub fn prior(&self) -> Result<ProportionPrior> {
        let k = self.class_count();
        let sc = &self.scenario;
        let mode = sc.kind.prior_mode();
        let override_allowed = matches!(sc.kind, Scenario::Si | Scenario::Siv);
        if sc.prior_w.is_some() && !override_allowed {
            return Err(config(format!("prior_w only applies to SI and SIV, not {}", sc.kind.name())));
        }
        if sc.census.is_some() && sc.kind != Scenario::Sii {
            return Err(config(format!("census data only applies to SII, not {}", sc.kind.name())));
        }
        let global = match sc.kind {
            Scenario::Si | Scenario::Siv => Some(sc.prior_w.clone().unwrap_or_else(|| self.annotated_proportions())),
            Scenario::Sii => {
                let census = sc.census.as_ref().ok_or_else(|| config("SII needs a census block"))?;
                if census.classes.len() != k {
                    return Err(config(format!("census names {} classes, the data has {k}", census.classes.len())));
                }
                Some(census_prior(&census.shares, &census.classes).map_err(|e| config(e.to_string()))?)
            }
            Scenario::Siii | Scenario::SwavBaseline => None,
        };
        ProportionPrior::for_mode(mode, k, global).map_err(|e| config(e.to_string()))
    }

    /// Configured policy, or the default for the data kind.
    pub fn augmentation(&self, configured: Option<&AugmentationPolicy>) -> Result<AugmentationPolicy> {
        let policy = match (configured, &self.prepared) {
            (Some(p), _) => p.clone(),
            (None, Prepared::Vector { .. }) => AugmentationPolicy::Vector { noise_sigma: 0.3, dropout: 0.1 },
            (None, Prepared::Raster(r)) => AugmentationPolicy::patch_default(r.channels, r.patch_size),
        };
        policy.validate().map_err(|e| config(e.to_string()))?;
        Ok(policy)
    }
}
