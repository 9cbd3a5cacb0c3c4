//! Experiment configuration files: strict JSON, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use llpco::bagging::PriorMode;
use llpco::datagen::{AugmentationPolicy, BlobConfig, PatchWorldConfig};
use llpco::model::Precision;
use llpco::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{config, io, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Two-view policy; defaults to light noise for vectors and the
    /// rotate/mirror/crop set for patches.
    #[serde(default)]
    pub augmentation: Option<AugmentationPolicy>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub io: IoConfig,
}

/// Exactly one generator block for `generate`; the split settings are also
/// read by `train` and `eval` so vector datasets split the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub blobs: Option<BlobConfig>,
    #[serde(default)]
    pub raster: Option<PatchWorldConfig>,
    /// Share of vector samples held out for testing. Rasters carry their own
    /// field-level split.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { blobs: None, raster: None, test_fraction: default_test_fraction(), split_seed: 0 }
    }
}

/// The supervision setups, serialized under their scenario labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "SI")]
    Si,
    #[serde(rename = "SII")]
    Sii,
    #[serde(rename = "SIII")]
    Siii,
    #[serde(rename = "SIV")]
    Siv,
    #[serde(rename = "swav_baseline", alias = "SwAV-baseline")]
    SwavBaseline,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::Si, Scenario::Sii, Scenario::Siii, Scenario::Siv, Scenario::SwavBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Si => "SI",
            Scenario::Sii => "SII",
            Scenario::Siii => "SIII",
            Scenario::Siv => "SIV",
            Scenario::SwavBaseline => "SwAV-baseline",
        }
    }

    pub fn prior_mode(self) -> PriorMode {
        match self {
            Scenario::Si | Scenario::Siv => PriorMode::GlobalAnnotated,
            Scenario::Sii => PriorMode::GlobalCensus,
            Scenario::Siii => PriorMode::ExactPerBag,
            Scenario::SwavBaseline => PriorMode::Equipartition,
        }
    }

    /// Trains on the variance-masked region (labelled or not) instead of the
    /// annotated training fields.
    pub fn uses_variance_mask(self) -> bool {
        self == Scenario::Sii
    }

    /// SIII and SIV always train on every class; the others may fold minor
    /// classes into a trailing `others` class.
    pub fn allows_grouping(self) -> bool {
        matches!(self, Scenario::Si | Scenario::Sii | Scenario::SwavBaseline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: Scenario,
    /// Classes kept as-is (in this order); every other class becomes
    /// `others`, appended last.
    #[serde(default)]
    pub major_classes: Option<Vec<usize>>,
    /// Replaces the annotated global prior of SI/SIV.
    #[serde(default)]
    pub prior_w: Option<Vec<f64>>,
    #[serde(default)]
    pub census: Option<CensusConfig>,
    /// Display names of the (possibly grouped) classes.
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default = "default_mask_percentile")]
    pub mask_percentile: f64,
    /// Dates in the synthetic vegetation-index stack behind the mask.
    #[serde(default = "default_index_dates")]
    pub index_dates: usize,
}

fn default_mask_percentile() -> f64 {
    25.0
}

fn default_index_dates() -> usize {
    8
}

impl ScenarioConfig {
    pub fn new(kind: Scenario) -> Self {
        Self {
            kind,
            major_classes: None,
            prior_w: None,
            census: None,
            class_names: None,
            mask_percentile: default_mask_percentile(),
            index_dates: default_index_dates(),
        }
    }
}

/// Census planted-area percentages; `classes` names the model's classes in
/// order and must end with `others`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusConfig {
    pub shares: Vec<(String, f64)>,
    pub classes: Vec<String>,
}

/// Model settings not implied by the data (input width and class count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn default_embed_dim() -> usize {
    32
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self { hidden_dims: default_hidden(), embed_dim: default_embed_dim(), precision: Precision::F32, init_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    /// k-means restarts for the equipartition baseline, one report each.
    #[serde(default = "default_kmeans_seeds")]
    pub kmeans_seeds: Vec<u64>,
    /// Write a class map for raster datasets.
    #[serde(default = "default_true")]
    pub class_map: bool,
}

fn default_knn_k() -> usize {
    25
}

fn default_kmeans_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_true() -> bool {
    true
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { knn_k: default_knn_k(), kmeans_seeds: default_kmeans_seeds(), class_map: true }
    }
}

/// Input paths; unset paths default to files inside `--out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

pub const DATASET_FILE: &str = "dataset.llpd";
pub const CHECKPOINT_FILE: &str = "checkpoint.llpc";

impl IoConfig {
    pub fn dataset_path(&self, out: &Path) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| out.join(DATASET_FILE))
    }

    pub fn checkpoint_path(&self, out: &Path) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        Self::from_json(&text).map_err(|e| config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn scenario(&self) -> Result<&ScenarioConfig> {
        self.scenario.as_ref().ok_or_else(|| config("missing scenario block"))
    }

    pub fn train_config(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| config("missing train block"))
    }
}
