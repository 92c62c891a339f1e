//! Label augmentation: the tanh distance map channel, its losses, and the
//! distance transform both rely on.

pub mod edt;
pub mod loss;

pub use edt::{
    euclidean_distance_transform, squared_distance_transform, squared_distance_transform_with, Spacing, UNIT_SPACING,
};
pub use loss::{
    boundary_loss, coherence_loss, segmentation_loss, total_loss, CoherenceForm, LossTerms, LossWeights,
    BOUNDARY_THRESHOLD, PROB_CLAMP,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `tanh` of each cleft voxel's distance (unit spacing) to the nearest
/// background voxel; zero on background.
///
/// A cleft voxel next to background gets `tanh(1)`, so the map is positive
/// exactly on the cleft.
pub fn tanh_distance_map(y_s: &Tensor<bool>) -> Result<Tensor<f64>> {
    if !y_s.data().iter().any(|&m| m) {
        return Tensor::zeros(y_s.shape());
    }
    let background = y_s.map(|m| !m);
    let dist = match euclidean_distance_transform(&background, UNIT_SPACING) {
        Err(Error::EmptyTarget) => return Err(Error::NoBackground),
        r => r?,
    };
    dist.zip_map(y_s, |d, m| if m { d.tanh() } else { 0.0 })
}

/// Per-voxel label pair: segmentation mask and its tanh distance map.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedLabels {
    pub segmentation: Tensor<bool>,
    pub boundary: Tensor<f64>,
}

impl AugmentedLabels {
    pub fn from_mask(mask: Tensor<bool>) -> Result<Self> {
        let boundary = tanh_distance_map(&mask)?;
        Ok(Self {
            segmentation: mask,
            boundary,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_voxel_and_line() {
        let m = Tensor::from_fn(&[3, 3, 3], |i| i == [1, 1, 1]).unwrap();
        let t = tanh_distance_map(&m).unwrap();
        assert!((t.get(&[1, 1, 1]) - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert_eq!(t.sum(), t.get(&[1, 1, 1]));

        let line = Tensor::from_fn(&[1, 1, 7], |i| (2..=4).contains(&i[2])).unwrap();
        let t = tanh_distance_map(&line).unwrap();
        let want = [0.0, 0.0, 1f64.tanh(), 2f64.tanh(), 1f64.tanh(), 0.0, 0.0];
        assert_eq!(t.data(), &want);
    }

    #[test]
    fn degenerate_masks() {
        let none = Tensor::full(&[2, 2, 2], false).unwrap();
        assert!(tanh_distance_map(&none).unwrap().data().iter().all(|&v| v == 0.0));
        let all = Tensor::full(&[2, 2, 2], true).unwrap();
        assert!(matches!(tanh_distance_map(&all), Err(Error::NoBackground)));
    }
}
