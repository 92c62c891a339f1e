//! Joint geometric and intensity augmentation of training patches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PatchSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentProbs {
    pub rotate: f64,
    pub flip: f64,
    pub grayscale: f64,
}

impl Default for AugmentProbs {
    fn default() -> Self {
        Self {
            rotate: 0.5,
            flip: 0.5,
            grayscale: 0.2,
        }
    }
}

impl AugmentProbs {
    pub const NONE: AugmentProbs = AugmentProbs {
        rotate: 0.0,
        flip: 0.0,
        grayscale: 0.0,
    };
}

/// Decisions taken for one patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    /// Quarter turns in the `(h, w)` plane.
    pub quarter_turns: u8,
    /// Flipped axis (0 = d, 1 = h, 2 = w).
    pub flip_axis: Option<usize>,
    /// `raw ← clamp(gain · raw + offset, 0, 1)`.
    pub intensity: Option<(f32, f32)>,
}

/// One counter-clockwise quarter turn in the `(h, w)` plane: `(d, h, w) → (d, w, h)`.
pub fn rotate90<T: Copy>(t: &Tensor<T>) -> Tensor<T> {
    let [d, h, w] = *t.shape() else {
        panic!("rotate90 expects a (d, h, w) volume");
    };
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for z in 0..d {
        for i in 0..w {
            for j in 0..h {
                out.push(src[(z * h + j) * w + (w - 1 - i)]);
            }
        }
    }
    Tensor::from_vec(&[d, w, h], out).expect("same element count")
}

pub fn rotate<T: Copy>(t: &Tensor<T>, quarter_turns: u8) -> Tensor<T> {
    let mut out = t.clone();
    for _ in 0..quarter_turns % 4 {
        out = rotate90(&out);
    }
    out
}

/// Reverses one axis of a `(d, h, w)` volume.
pub fn flip<T: Copy>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let s = t.shape();
    let [d, h, w] = [s[0], s[1], s[2]];
    Tensor::from_fn(&[d, h, w], |i| {
        let mut j = [i[0], i[1], i[2]];
        j[axis] = s[axis] - 1 - j[axis];
        t.data()[(j[0] * h + j[1]) * w + j[2]]
    })
    .expect("same shape")
}

/// Rotation uses `k ∈ {1, 2, 3}` quarter turns on square patches and a half
/// turn otherwise, so patch extents never change.
pub fn augment<R: Rng>(mut p: PatchSample, rng: &mut R, probs: &AugmentProbs) -> PatchSample {
    let mut rec = AugmentRecord::default();
    if rng.random_bool(probs.rotate) {
        let s = p.raw.shape();
        rec.quarter_turns = if s[1] == s[2] { rng.random_range(1..=3) } else { 2 };
        p.raw = rotate(&p.raw, rec.quarter_turns);
        p.segmentation = rotate(&p.segmentation, rec.quarter_turns);
        p.boundary = rotate(&p.boundary, rec.quarter_turns);
    }
    if rng.random_bool(probs.flip) {
        let axis = rng.random_range(0..3);
        rec.flip_axis = Some(axis);
        p.raw = flip(&p.raw, axis);
        p.segmentation = flip(&p.segmentation, axis);
        p.boundary = flip(&p.boundary, axis);
    }
    if rng.random_bool(probs.grayscale) {
        let gain: f32 = rng.random_range(0.9..=1.1);
        let offset: f32 = rng.random_range(-0.1..=0.1);
        rec.intensity = Some((gain, offset));
        p.raw = p.raw.map(|v| (gain * v + offset).clamp(0.0, 1.0));
    }
    p.augmentation = rec;
    p
}
