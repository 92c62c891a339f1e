//! Synthetic EM-like volumes: a smooth bright background crossed by thin,
//! dark, gently curved sheets that play the role of synaptic clefts.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

const BACKGROUND_LEVEL: f64 = 170.0;
const CLEFT_CONTRAST: f64 = 85.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub extent: [usize; 3],
    pub n_clefts: usize,
    /// Sheet thickness in voxels.
    pub thickness: f64,
    /// Standard deviation of per-voxel intensity noise (grey levels).
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            extent: [40, 96, 96],
            n_clefts: 12,
            thickness: 2.0,
            noise: 8.0,
            seed: 0,
        }
    }
}

struct Sheet {
    /// In-plane axis the sheet is displaced along (1 = h, 2 = w).
    normal: usize,
    center: [f64; 3],
    half_len: f64,
    half_depth: f64,
    slope: f64,
    bend: f64,
    tilt: f64,
}

impl Sheet {
    fn random(rng: &mut ChaCha8Rng, ext: [usize; 3]) -> Self {
        let pick = |rng: &mut ChaCha8Rng, n: usize| rng.random_range(0.0..n as f64);
        Sheet {
            normal: rng.random_range(1..=2),
            center: [pick(rng, ext[0]), pick(rng, ext[1]), pick(rng, ext[2])],
            half_len: rng.random_range(6.0..14.0),
            half_depth: rng.random_range(2.0..5.0),
            slope: rng.random_range(-0.5..0.5),
            bend: rng.random_range(-0.04..0.04),
            tilt: rng.random_range(-1.0..1.0),
        }
    }

    fn contains(&self, p: [f64; 3], half_thickness: f64) -> bool {
        let t_axis = 3 - self.normal;
        let u = p[t_axis] - self.center[t_axis];
        let dz = p[0] - self.center[0];
        if u.abs() > self.half_len || dz.abs() > self.half_depth {
            return false;
        }
        let surface = self.center[self.normal] + self.slope * u + self.bend * u * u + self.tilt * dz;
        (p[self.normal] - surface).abs() < half_thickness
    }
}

/// Deterministic in `cfg.seed`.
pub fn synthesize(cfg: &SynthConfig) -> Result<Volume> {
    let [d, h, w] = cfg.extent;
    if d == 0 || h < 16 || w < 16 {
        return Err(contract_err!("synthetic extents must be ≥ 1 × 16 × 16, got {:?}", cfg.extent));
    }
    if !(cfg.thickness > 0.0) || !(cfg.noise >= 0.0) {
        return Err(contract_err!("thickness must be positive and noise non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Low-frequency cosine waves for the background.
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let f = [
                rng.random_range(0.0..0.08),
                rng.random_range(0.0..0.06),
                rng.random_range(0.0..0.06),
            ];
            (f, rng.random_range(0.0..TAU), rng.random_range(4.0..10.0))
        })
        .collect();
    let sheets: Vec<Sheet> = (0..cfg.n_clefts).map(|_| Sheet::random(&mut rng, cfg.extent)).collect();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| contract_err!("{e}"))?;
    let half = cfg.thickness / 2.0;

    let labels = Tensor::from_fn(&[d, h, w], |i| {
        let p = [i[0] as f64, i[1] as f64, i[2] as f64];
        sheets.iter().any(|s| s.contains(p, half))
    })?;
    let mut raw = Vec::with_capacity(d * h * w);
    for (idx, &cleft) in labels.data().iter().enumerate() {
        let p = [(idx / (h * w)) as f64, ((idx / w) % h) as f64, (idx % w) as f64];
        let mut v = BACKGROUND_LEVEL;
        for (f, phase, amp) in &waves {
            v += amp * (TAU * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2]) + phase).cos();
        }
        if cleft {
            v -= CLEFT_CONTRAST;
        }
        v += noise.sample(&mut rng);
        raw.push(v.round().clamp(0.0, 255.0) as u8);
    }
    let raw = Tensor::from_vec(&[d, h, w], raw)?;
    Volume::new(format!("synth-{}", cfg.seed), raw, labels, [1.0; 3])
}
