//! Volumes, their on-disk formats, synthetic generation, and patch sampling.

pub mod augment;
#[cfg(feature = "hdf5")]
pub mod cremi;
pub mod sample;
pub mod synth;
pub mod vol1;

use std::path::{Path, PathBuf};

pub use augment::{augment, AugmentProbs, AugmentRecord};
pub use sample::{PatchSample, Rejection, Sampler};
pub use synth::{synthesize, SynthConfig};
pub use vol1::{read_vol1, write_vol1, Vol1, Vol1Data};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::labels::Spacing;
use crate::tensor::Tensor;

/// Physical spacing of CREMI volumes in nm, `(d, h, w)`.
pub const CREMI_SPACING: Spacing = [40.0, 4.0, 4.0];

/// A grayscale EM volume with its binary cleft labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub name: String,
    pub raw: Tensor<u8>,
    pub labels: Tensor<bool>,
    pub spacing: Spacing,
}

impl Volume {
    pub fn new(name: impl Into<String>, raw: Tensor<u8>, labels: Tensor<bool>, spacing: Spacing) -> Result<Self> {
        if raw.rank() != 3 || raw.shape() != labels.shape() {
            return Err(shape_err!(
                "raw {:?} and labels {:?} must be matching (d, h, w) volumes",
                raw.shape(),
                labels.shape()
            ));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(contract_err!("spacing must be positive, got {spacing:?}"));
        }
        Ok(Self {
            name: name.into(),
            raw,
            labels,
            spacing,
        })
    }

    pub fn extent(&self) -> [usize; 3] {
        let s = self.raw.shape();
        [s[0], s[1], s[2]]
    }

    pub fn cleft_fraction(&self) -> f64 {
        self.labels.data().iter().filter(|&&m| m).count() as f64 / self.labels.len() as f64
    }

    /// Slices `[z0, z1)` along depth.
    pub fn slab(&self, z0: usize, z1: usize) -> Result<Volume> {
        let [d, h, w] = self.extent();
        if z0 >= z1 || z1 > d {
            return Err(contract_err!("slab {z0}..{z1} outside depth {d}"));
        }
        let plane = h * w;
        let raw = Tensor::from_vec(&[z1 - z0, h, w], self.raw.data()[z0 * plane..z1 * plane].to_vec())?;
        let labels = Tensor::from_vec(&[z1 - z0, h, w], self.labels.data()[z0 * plane..z1 * plane].to_vec())?;
        Volume::new(self.name.clone(), raw, labels, self.spacing)
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn normalized_raw(&self) -> Tensor<f32> {
        self.raw.map(|v| v as f32 / 255.0)
    }

    /// Writes `<stem>.raw.vol1` and `<stem>.labels.vol1`.
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let (rp, lp) = volume_paths(stem);
        let spacing = self.spacing.map(|s| s as f32);
        write_vol1(&rp, &Vol1 { data: Vol1Data::Raw(self.raw.clone()), spacing })?;
        write_vol1(&lp, &Vol1 { data: Vol1Data::Mask(self.labels.clone()), spacing })?;
        Ok((rp, lp))
    }

    pub fn load(stem: &Path) -> Result<Volume> {
        let (rp, lp) = volume_paths(stem);
        let raw = read_vol1(&rp)?;
        let labels = read_vol1(&lp)?;
        let Vol1Data::Raw(r) = raw.data else {
            return Err(Error::Format(format!("{} does not hold raw intensities", rp.display())));
        };
        let Vol1Data::Mask(m) = labels.data else {
            return Err(Error::Format(format!("{} does not hold a label mask", lp.display())));
        };
        let name = stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Volume::new(name, r, m, raw.spacing.map(f64::from))
    }
}

pub fn volume_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.raw.vol1")), PathBuf::from(format!("{s}.labels.vol1")))
}

/// Depth split into training and validation slabs: the first 100 slices of a
/// 125-slice volume, otherwise the first 80% (at least one slice each side).
pub fn train_val_split(volume: &Volume) -> Result<(Volume, Volume)> {
    let d = volume.extent()[0];
    if d < 2 {
        return Err(contract_err!("cannot split a volume of depth {d}"));
    }
    let cut = if d == 125 { 100 } else { ((d * 4) / 5).clamp(1, d - 1) };
    Ok((volume.slab(0, cut)?, volume.slab(cut, d)?))
}
