//! Import of CREMI-style HDF5 containers.

use std::path::Path;

use super::{Volume, CREMI_SPACING};
use crate::error::{Error, Result};
use crate::labels::Spacing;
use crate::tensor::Tensor;

/// Label id CREMI uses for "no cleft".
pub const DEFAULT_BACKGROUND_SENTINEL: u64 = u64::MAX;

/// Attribute holding the voxel size in nm.
pub const RESOLUTION_ATTR: &str = "resolution";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CremiPaths {
    pub raw: String,
    pub clefts: String,
    pub background_sentinel: u64,
}

impl Default for CremiPaths {
    fn default() -> Self {
        Self {
            raw: "volumes/raw".into(),
            clefts: "volumes/labels/clefts".into(),
            background_sentinel: DEFAULT_BACKGROUND_SENTINEL,
        }
    }
}

fn h5err(context: &str, e: hdf5::Error) -> Error {
    Error::Import(format!("{context}: {e}"))
}

fn dataset_names(group: &hdf5::Group, out: &mut Vec<String>) -> hdf5::Result<()> {
    for d in group.datasets()? {
        out.push(d.name());
    }
    for g in group.groups()? {
        dataset_names(&g, out)?;
    }
    Ok(())
}

fn open_dataset(file: &hdf5::File, path: &str) -> Result<hdf5::Dataset> {
    file.dataset(path).map_err(|_| {
        let mut names = Vec::new();
        let listing = match dataset_names(file, &mut names) {
            Ok(()) if names.is_empty() => "none".to_string(),
            Ok(()) => names.join(", "),
            Err(e) => format!("<listing failed: {e}>"),
        };
        Error::Import(format!("dataset {path:?} not found; available datasets: {listing}"))
    })
}

fn read_spacing(ds: &hdf5::Dataset) -> Result<Option<Spacing>> {
    if !ds.attr_names().map_err(|e| h5err("attributes", e))?.iter().any(|n| n == RESOLUTION_ATTR) {
        return Ok(None);
    }
    let v: Vec<f64> = ds
        .attr(RESOLUTION_ATTR)
        .and_then(|a| a.read_raw())
        .map_err(|e| h5err("resolution attribute", e))?;
    match v[..] {
        [d, h, w] => Ok(Some([d, h, w])),
        _ => Err(Error::Import(format!("resolution attribute has {} entries, expected 3", v.len()))),
    }
}

/// Loads raw intensities and binarised cleft labels (cleft iff id differs
/// from the sentinel). Spacing comes from a `resolution` attribute on either
/// dataset, else defaults to 40 × 4 × 4 nm.
pub fn import_cremi(path: &Path, paths: &CremiPaths) -> Result<Volume> {
    let file = hdf5::File::open(path).map_err(|e| h5err(&path.display().to_string(), e))?;
    let raw_ds = open_dataset(&file, &paths.raw)?;
    let cleft_ds = open_dataset(&file, &paths.clefts)?;
    let shape = raw_ds.shape();
    if shape.len() != 3 || cleft_ds.shape() != shape {
        return Err(Error::Import(format!(
            "raw {:?} and clefts {:?} must be matching 3-D datasets",
            shape,
            cleft_ds.shape()
        )));
    }
    let raw: Vec<u8> = raw_ds.read_raw().map_err(|e| h5err(&paths.raw, e))?;
    let ids: Vec<u64> = cleft_ds.read_raw().map_err(|e| h5err(&paths.clefts, e))?;
    let labels = ids.iter().map(|&id| id != paths.background_sentinel).collect();
    let spacing = match read_spacing(&raw_ds)? {
        Some(s) => s,
        None => read_spacing(&cleft_ds)?.unwrap_or(CREMI_SPACING),
    };
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Volume::new(name, Tensor::from_vec(&shape, raw)?, Tensor::from_vec(&shape, labels)?, spacing)
}
