//! Synthetic data: labelled vector blobs, field-mosaic patch rasters,
//! two-view augmentation, temporal-variance masking and dataset files.

mod augment;
mod blobs;
pub(crate) mod io;
mod mask;
mod raster;
mod source;

pub use augment::{mirror, resized_crop, rotate90, two_views, AugmentationPolicy};
pub use blobs::{gen_blobs, largest_remainder_counts, place_centers, BlobConfig, VectorDataset};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, Dataset, DATASET_MAGIC, DATASET_VERSION};
pub use mask::{variance_mask, VarianceMask};
pub use raster::{
    extract_patch, gen_index_stack, gen_patch_world, CenterFilter, IndexStack, PatchRaster, PatchWorldConfig,
    SensorMode, UNLABELED,
};
pub use source::{PatchSamples, SampleSource};
