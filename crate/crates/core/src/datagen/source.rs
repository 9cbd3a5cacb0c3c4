use super::blobs::VectorDataset;
use super::raster::{write_patch, PatchRaster, UNLABELED};
use crate::error::{invalid, Result};

/// Indexable collection of training samples as seen by the trainer and the
/// evaluation code.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn input_dim(&self) -> usize;

    fn class_count(&self) -> usize;

    /// Writes sample `index` into `out` (length [`SampleSource::input_dim`]).
    fn write_sample(&self, index: usize, out: &mut [f32]);

    fn label(&self, index: usize) -> Option<usize>;

    /// Labels of every sample, if all are labelled.
    fn labels(&self) -> Option<Vec<usize>> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

impl SampleSource for VectorDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn write_sample(&self, index: usize, out: &mut [f32]) {
        out.iter_mut().zip(self.features.row(index)).for_each(|(o, &x)| *o = x);
    }

    fn label(&self, index: usize) -> Option<usize> {
        Some(self.labels[index])
    }
}

/// Patches cut on demand around a fixed list of raster centres.
#[derive(Debug, Clone)]
pub struct PatchSamples<'a> {
    pub raster: &'a PatchRaster,
    pub centers: Vec<(usize, usize)>,
}

impl<'a> PatchSamples<'a> {
    pub fn new(raster: &'a PatchRaster, centers: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(&(row, col)) = centers.iter().find(|&&(r, c)| !raster.is_valid_center(r, c)) {
            return Err(invalid(format!("({row}, {col}) is not a valid patch centre")));
        }
        Ok(Self { raster, centers })
    }
}

impl SampleSource for PatchSamples<'_> {
    fn len(&self) -> usize {
        self.centers.len()
    }

    fn input_dim(&self) -> usize {
        self.raster.patch_len()
    }

    fn class_count(&self) -> usize {
        self.raster.class_count
    }

    fn write_sample(&self, index: usize, out: &mut [f32]) {
        let (row, col) = self.centers[index];
        write_patch(self.raster, row, col, out).expect("centres are validated on construction");
    }

    fn label(&self, index: usize) -> Option<usize> {
        let (row, col) = self.centers[index];
        match self.raster.label_at(row, col) {
            UNLABELED => None,
            l => Some(l as usize),
        }
    }
}
