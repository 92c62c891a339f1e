//! Independent brute-force oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use cleftnet::data::{synthesize, SynthConfig, Volume};
use cleftnet::model::ModelConfig;
use cleftnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random `(d, h, w)` mask with every extent in `1..=max` and the given density.
pub fn random_mask(rng: &mut ChaCha8Rng, max: usize, density: f64) -> Tensor<bool> {
    let shape: Vec<usize> = (0..3).map(|_| rng.random_range(1..=max)).collect();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_bool(density)).collect();
    Tensor::from_vec(&shape, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn coords(shape: &[usize]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

pub fn sq_dist(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| {
            let d = (a[i] as f64 - b[i] as f64) * spacing[i];
            d * d
        })
        .sum()
}

/// Squared distance from every voxel to the nearest `true` voxel of `target`.
pub fn brute_sq_distance(target: &Tensor<bool>, spacing: [f64; 3]) -> Vec<f64> {
    let all = coords(target.shape());
    let on: Vec<[usize; 3]> = all.iter().zip(target.data()).filter(|(_, &m)| m).map(|(&c, _)| c).collect();
    all.iter()
        .map(|&p| on.iter().map(|&q| sq_dist(p, q, spacing)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// `tanh` of each foreground voxel's unit-spacing distance to background.
pub fn brute_tanh_map(mask: &Tensor<bool>) -> Vec<f64> {
    if !mask.data().iter().any(|&m| m) {
        return vec![0.0; mask.len()];
    }
    let background = mask.map(|m| !m);
    let d2 = brute_sq_distance(&background, [1.0; 3]);
    d2.iter().zip(mask.data()).map(|(&d, &m)| if m { d.sqrt().tanh() } else { 0.0 }).collect()
}

/// Mean over `from` voxels of the distance to the nearest `to` voxel.
pub fn pairwise_mean_distance(from: &Tensor<bool>, to: &Tensor<bool>, spacing: [f64; 3]) -> f64 {
    let all = coords(from.shape());
    let a: Vec<_> = all.iter().zip(from.data()).filter(|(_, &m)| m).map(|(&c, _)| c).collect();
    let b: Vec<_> = all.iter().zip(to.data()).filter(|(_, &m)| m).map(|(&c, _)| c).collect();
    let total: f64 = a
        .iter()
        .map(|&p| b.iter().map(|&q| sq_dist(p, q, spacing).sqrt()).fold(f64::INFINITY, f64::min))
        .sum();
    total / a.len() as f64
}

/// AUC as the fraction of positive/negative pairs ranked correctly, ties ½,
/// in units of half-pairs so the comparison can be exact.
pub fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice_wins += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

/// Direct 6-loop cross-correlation over `(b, d, h, w, c)` inputs with zero padding.
pub fn loop_conv3d(x: &Tensor<f64>, k: &Tensor<f64>, stride: [usize; 3], pad: [usize; 3]) -> Tensor<f64> {
    let [b, d, h, w, ci] = *x.shape() else { panic!("rank") };
    let [kd, kh, kw, _, co] = *k.shape() else { panic!("rank") };
    let out = [
        (d + 2 * pad[0] - kd) / stride[0] + 1,
        (h + 2 * pad[1] - kh) / stride[1] + 1,
        (w + 2 * pad[2] - kw) / stride[2] + 1,
    ];
    Tensor::from_fn(&[b, out[0], out[1], out[2], co], |i| {
        let mut acc = 0.0;
        for a in 0..kd {
            for bb in 0..kh {
                for c in 0..kw {
                    let z = (i[1] * stride[0] + a) as isize - pad[0] as isize;
                    let y = (i[2] * stride[1] + bb) as isize - pad[1] as isize;
                    let xx = (i[3] * stride[2] + c) as isize - pad[2] as isize;
                    if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= w as isize {
                        continue;
                    }
                    for m in 0..ci {
                        acc += x.get(&[i[0], z as usize, y as usize, xx as usize, m]) * k.get(&[a, bb, c, m, i[4]]);
                    }
                }
            }
        }
        acc
    })
    .unwrap()
}

/// `z[t] = Σ_s softmax_s(q[t]·k[s]) v[s]` for one item, naive and unshifted.
pub fn loop_attention(k: &[Vec<f64>], v: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qt| {
            let e: Vec<f64> = k.iter().map(|ks| ks.iter().zip(qt).map(|(a, b)| a * b).sum::<f64>().exp()).collect();
            let total: f64 = e.iter().sum();
            let mut z = vec![0.0; v[0].len()];
            for (es, vs) in e.iter().zip(v) {
                for (o, &x) in z.iter_mut().zip(vs) {
                    *o += es / total * x;
                }
            }
            z
        })
        .collect()
}

/// Trilinear value at output `o` of an axis of length `n` upsampled by `f`,
/// half-pixel centres with edge clamping, as `(i0, i1, weight of i1)`.
pub fn linear_taps(o: usize, n: usize, f: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

/// A network small enough that a training step takes milliseconds.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: vec![2, 3, 4, 5],
        bottom_channels: 6,
        divisor: 1,
        patch: [2, 16, 16],
        ..ModelConfig::default()
    }
}

pub fn tiny_volume(seed: u64) -> Volume {
    synthesize(&SynthConfig {
        extent: [6, 32, 32],
        n_clefts: 6,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}
