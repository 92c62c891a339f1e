//! Sliding-window prediction over whole volumes.

use crate::error::{contract_err, Result};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

/// Patch origins along one axis: stride `patch − overlap`, with the last
/// window flush against the end.
pub fn tile_starts(len: usize, patch: usize, overlap: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > len {
        return Err(contract_err!("window {patch} does not fit extent {len}"));
    }
    if overlap >= patch {
        return Err(contract_err!("overlap {overlap} must be smaller than window {patch}"));
    }
    let step = patch - overlap;
    let mut starts: Vec<usize> = (0..=len - patch).step_by(step).collect();
    if *starts.last().expect("non-empty") != len - patch {
        starts.push(len - patch);
    }
    Ok(starts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub segmentation: Tensor<f32>,
    pub boundary: Option<Tensor<f32>>,
}

/// Predicts every voxel of `raw: (d, h, w)` (intensities in `[0, 1]`) with
/// windows of the model's patch size; overlapping windows are averaged.
pub fn sliding_window<T: Real>(model: &Model<T>, raw: &Tensor<f32>, overlap: [usize; 3]) -> Result<Prediction> {
    let [d, h, w] = *raw.shape() else {
        return Err(contract_err!("expected a (d, h, w) volume, got {:?}", raw.shape()));
    };
    let ext = [d, h, w];
    let patch = model.config.patch;
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|i| tile_starts(ext[i], patch[i], overlap[i]))
        .collect::<Result<_>>()?;
    let n = d * h * w;
    let mut seg = vec![0.0f64; n];
    let mut bnd = vec![0.0f64; n];
    let mut hits = vec![0u32; n];
    let with_boundary = model.config.head_channels() == 2;
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let tile = crate::data::sample::crop(raw, [z0, y0, x0], patch)?;
                let input = Tensor::from_vec(&[1, patch[0], patch[1], patch[2], 1], tile.map(|v| T::of(v as f64)).into_data())?;
                let (ps, yb) = model.predict(&input)?;
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        for x in 0..patch[2] {
                            let src = (z * patch[1] + y) * patch[2] + x;
                            let dst = ((z0 + z) * h + y0 + y) * w + x0 + x;
                            seg[dst] += ps.data()[src].to_f64();
                            if let Some(b) = &yb {
                                bnd[dst] += b.data()[src].to_f64();
                            }
                            hits[dst] += 1;
                        }
                    }
                }
            }
        }
    }
    let avg = |acc: Vec<f64>| -> Result<Tensor<f32>> {
        Tensor::from_vec(&ext, acc.iter().zip(&hits).map(|(&s, &c)| (s / c as f64) as f32).collect())
    };
    Ok(Prediction {
        segmentation: avg(seg)?,
        boundary: if with_boundary { Some(avg(bnd)?) } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_the_extent() {
        assert_eq!(tile_starts(32, 8, 0).unwrap(), vec![0, 8, 16, 24]);
        assert_eq!(tile_starts(30, 8, 0).unwrap(), vec![0, 8, 16, 22]);
        assert_eq!(tile_starts(16, 8, 4).unwrap(), vec![0, 4, 8]);
        assert_eq!(tile_starts(8, 8, 0).unwrap(), vec![0]);
        assert!(tile_starts(4, 8, 0).is_err());
        assert!(tile_starts(16, 8, 8).is_err());
    }
}
