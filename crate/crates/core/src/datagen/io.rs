//! Dataset files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "LLPD" | version: u32 | kind: u8 (0 = vector, 1 = raster)
//! vector: n: u64 | d: u64 | classes: u64 | features: n·d × f32 | labels: n × i32
//! raster: channels: u64 | height: u64 | width: u64 | patch: u64 | classes: u64
//!         | data: c·h·w × f32 | labels: h·w × i32 | test split: h·w × u8
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::blobs::VectorDataset;
use super::raster::PatchRaster;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"LLPD";
pub const DATASET_VERSION: u32 = 1;

const KIND_VECTOR: u8 = 0;
const KIND_RASTER: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Vector(VectorDataset),
    Raster(PatchRaster),
}

impl Dataset {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Dataset::Vector(_) => "vector",
            Dataset::Raster(_) => "raster",
        }
    }
}

pub fn write_dataset(dataset: &Dataset, out: &mut impl Write) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    let mut buf = Vec::new();
    match dataset {
        Dataset::Vector(v) => {
            buf.push(KIND_VECTOR);
            for dim in [v.len(), v.dim(), v.class_count] {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            v.features.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            v.labels.iter().for_each(|&l| buf.extend_from_slice(&(l as i32).to_le_bytes()));
        }
        Dataset::Raster(r) => {
            buf.push(KIND_RASTER);
            for dim in [r.channels, r.height, r.width, r.patch_size, r.class_count] {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            r.data.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            r.labels.iter().for_each(|l| buf.extend_from_slice(&l.to_le_bytes()));
            buf.extend(r.test_mask.iter().map(|&t| u8::from(t)));
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_dataset(dataset, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&fs::read(path)?)
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("dimension does not fit in usize".into()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn check_header(r: &mut Reader<'_>, magic: &[u8; 4], supported: u32) -> Result<()> {
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::Format(format!("bad magic {found:?}, expected {magic:?}")));
    }
    let version = r.u32()?;
    if version != supported {
        return Err(Error::UnsupportedVersion { found: version, supported });
    }
    Ok(())
}

pub(crate) fn read_header(r: &mut Reader<'_>, magic: &[u8; 4], supported: u32) -> Result<()> {
    check_header(r, magic, supported)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, DATASET_MAGIC, DATASET_VERSION)?;
    let dataset = match r.u8()? {
        KIND_VECTOR => {
            let (n, d, k) = (r.usize()?, r.usize()?, r.usize()?);
            let features = r.f32s(n.checked_mul(d).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let labels = r
                .i32s(n)?
                .into_iter()
                .map(|l| usize::try_from(l).map_err(|_| Error::Format(format!("negative vector label {l}"))))
                .collect::<Result<Vec<_>>>()?;
            let features = Array2::from_shape_vec((n, d), features).map_err(|e| Error::Format(e.to_string()))?;
            Dataset::Vector(VectorDataset::new(features, labels, k).map_err(|e| Error::Format(e.to_string()))?)
        }
        KIND_RASTER => {
            let (channels, height, width, patch_size, class_count) =
                (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
            let pixels = height.checked_mul(width).ok_or_else(|| Error::Format("size overflow".into()))?;
            let data = r.f32s(channels.checked_mul(pixels).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let labels = r.i32s(pixels)?;
            let test_mask = r.take(pixels)?.iter().map(|&b| b != 0).collect();
            let raster = PatchRaster { channels, height, width, data, labels, test_mask, patch_size, class_count };
            raster.validate().map_err(|e| Error::Format(e.to_string()))?;
            Dataset::Raster(raster)
        }
        other => return Err(Error::Format(format!("unknown dataset kind {other}"))),
    };
    r.finish()?;
    Ok(dataset)
}
