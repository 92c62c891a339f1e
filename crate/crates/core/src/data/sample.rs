//! Random patch extraction with rejection of cleft-poor patches.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{augment, AugmentProbs, AugmentRecord, Volume};
use crate::error::{contract_err, Result};
use crate::labels::tanh_distance_map;
use crate::tensor::Tensor;

/// Patches with fewer than `min_cleft` cleft voxels are redrawn with
/// probability `p_reject`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Rejection {
    pub min_cleft: usize,
    pub p_reject: f64,
}

impl Default for Rejection {
    fn default() -> Self {
        Self {
            min_cleft: 200,
            p_reject: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// Intensities in `[0, 1]`.
    pub raw: Tensor<f32>,
    pub segmentation: Tensor<bool>,
    /// Tanh distance map cropped from the full volume's map.
    pub boundary: Tensor<f64>,
    pub origin: [usize; 3],
    /// Number of origins drawn before this one was accepted.
    pub draws: usize,
    pub augmentation: AugmentRecord,
}

/// Crops `extent` at `origin` from a `(d, h, w)` tensor.
pub fn crop<T: Copy>(t: &Tensor<T>, origin: [usize; 3], extent: [usize; 3]) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() != 3 || (0..3).any(|i| origin[i] + extent[i] > s[i]) {
        return Err(contract_err!("crop {extent:?} at {origin:?} exceeds {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(extent.iter().product());
    for z in origin[0]..origin[0] + extent[0] {
        for y in origin[1]..origin[1] + extent[1] {
            let row = (z * h + y) * w;
            out.extend_from_slice(&t.data()[row + origin[2]..row + origin[2] + extent[2]]);
        }
    }
    Tensor::from_vec(&extent, out)
}

/// Summed-volume table for constant-time box counts.
struct BoxCounter {
    table: Vec<u64>,
    dims: [usize; 3],
}

impl BoxCounter {
    fn new(mask: &Tensor<bool>) -> Self {
        let s = mask.shape();
        let dims = [s[0] + 1, s[1] + 1, s[2] + 1];
        let mut table = vec![0u64; dims.iter().product()];
        let at = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
        for z in 1..dims[0] {
            for y in 1..dims[1] {
                for x in 1..dims[2] {
                    let v = mask.data()[((z - 1) * s[1] + (y - 1)) * s[2] + (x - 1)] as u64;
                    table[at(z, y, x)] = v + table[at(z - 1, y, x)] + table[at(z, y - 1, x)] + table[at(z, y, x - 1)]
                        - table[at(z - 1, y - 1, x)]
                        - table[at(z - 1, y, x - 1)]
                        - table[at(z, y - 1, x - 1)]
                        + table[at(z - 1, y - 1, x - 1)];
                }
            }
        }
        Self { table, dims }
    }

    fn count(&self, o: [usize; 3], e: [usize; 3]) -> usize {
        let at = |z: usize, y: usize, x: usize| self.table[(z * self.dims[1] + y) * self.dims[2] + x] as i64;
        let (z0, y0, x0) = (o[0], o[1], o[2]);
        let (z1, y1, x1) = (o[0] + e[0], o[1] + e[1], o[2] + e[2]);
        (at(z1, y1, x1) - at(z0, y1, x1) - at(z1, y0, x1) - at(z1, y1, x0) + at(z0, y0, x1) + at(z0, y1, x0)
            + at(z1, y0, x0)
            - at(z0, y0, x0)) as usize
    }
}

/// Seeded patch source over one volume.
pub struct Sampler {
    volume: Volume,
    boundary: Tensor<f64>,
    counter: BoxCounter,
    extent: [usize; 3],
    pub rejection: Rejection,
    pub augmentation: AugmentProbs,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(volume: Volume, extent: [usize; 3], rejection: Rejection, augmentation: AugmentProbs, seed: u64) -> Result<Self> {
        let v = volume.extent();
        if (0..3).any(|i| extent[i] == 0 || extent[i] > v[i]) {
            return Err(contract_err!("patch {extent:?} does not fit volume {v:?}"));
        }
        if !(0.0..=1.0).contains(&rejection.p_reject) {
            return Err(contract_err!("reject probability {} outside [0, 1]", rejection.p_reject));
        }
        let boundary = tanh_distance_map(&volume.labels)?;
        let counter = BoxCounter::new(&volume.labels);
        Ok(Self {
            volume,
            boundary,
            counter,
            extent,
            rejection,
            augmentation,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    /// Full-volume tanh distance map.
    pub fn boundary(&self) -> &Tensor<f64> {
        &self.boundary
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn cleft_count(&self, origin: [usize; 3]) -> usize {
        self.counter.count(origin, self.extent)
    }

    /// Draws an origin uniformly, redrawing cleft-poor ones per the policy.
    pub fn draw_origin(&mut self) -> ([usize; 3], usize) {
        let v = self.volume.extent();
        let mut draws = 0;
        loop {
            draws += 1;
            let o: [usize; 3] = std::array::from_fn(|i| self.rng.random_range(0..=v[i] - self.extent[i]));
            if self.counter.count(o, self.extent) >= self.rejection.min_cleft || !self.rng.random_bool(self.rejection.p_reject) {
                return (o, draws);
            }
        }
    }

    /// Unaugmented patch at a given origin.
    pub fn patch_at(&self, origin: [usize; 3]) -> Result<PatchSample> {
        let raw = crop(&self.volume.raw, origin, self.extent)?.map(|v| v as f32 / 255.0);
        Ok(PatchSample {
            raw,
            segmentation: crop(&self.volume.labels, origin, self.extent)?,
            boundary: crop(&self.boundary, origin, self.extent)?,
            origin,
            draws: 1,
            augmentation: AugmentRecord::default(),
        })
    }

    pub fn sample(&mut self) -> Result<PatchSample> {
        let (origin, draws) = self.draw_origin();
        let mut p = self.patch_at(origin)?;
        p.draws = draws;
        let probs = self.augmentation;
        Ok(augment(p, &mut self.rng, &probs))
    }
}
