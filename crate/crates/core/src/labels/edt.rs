//! Exact Euclidean distance transform (separable lower-envelope algorithm).

use crate::error::{shape_err, Error, Result};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// Physical voxel size along (d, h, w).
pub type Spacing = [f64; 3];

pub const UNIT_SPACING: Spacing = [1.0, 1.0, 1.0];

fn volume_dims<T: Copy>(mask: &Tensor<T>) -> Result<[usize; 3]> {
    match *mask.shape() {
        [d, h, w] => Ok([d, h, w]),
        _ => Err(shape_err!("expected a (d, h, w) volume, got {:?}", mask.shape())),
    }
}

/// Squared distance from every voxel to the nearest `true` voxel.
pub fn squared_distance_transform(mask: &Tensor<bool>, spacing: Spacing) -> Result<Tensor<f64>> {
    squared_distance_transform_with(Exec::auto(), mask, spacing)
}

pub fn squared_distance_transform_with(exec: Exec, mask: &Tensor<bool>, spacing: Spacing) -> Result<Tensor<f64>> {
    let dims = volume_dims(mask)?;
    if !mask.data().iter().any(|&m| m) {
        return Err(Error::EmptyTarget);
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(shape_err!("spacing must be positive and finite, got {spacing:?}"));
    }
    let mut f: Vec<f64> = mask.data().iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let [d, h, w] = dims;
    // Along w: lines are contiguous.
    par::for_each_chunk(exec, &mut f, w, |_, line| {
        let src = line.to_vec();
        envelope(&src, spacing[2], line, &mut Scratch::new(w));
    });
    // Along h: one (h, w) slab per task, columns inside it.
    par::for_each_chunk(exec, &mut f, h * w, |_, slab| {
        let mut scratch = Scratch::new(h);
        let mut src = vec![0.0; h];
        let mut dst = vec![0.0; h];
        for x in 0..w {
            for y in 0..h {
                src[y] = slab[y * w + x];
            }
            envelope(&src, spacing[1], &mut dst, &mut scratch);
            for y in 0..h {
                slab[y * w + x] = dst[y];
            }
        }
    });
    // Along d: lines span the whole volume, gather them in blocks of columns.
    let plane = h * w;
    const BLOCK: usize = 64;
    let blocks = par::map_indices(exec, plane.div_ceil(BLOCK), |bi| {
        let (c0, c1) = (bi * BLOCK, ((bi + 1) * BLOCK).min(plane));
        let mut scratch = Scratch::new(d);
        let mut src = vec![0.0; d];
        let mut out = vec![0.0; (c1 - c0) * d];
        for (j, col) in (c0..c1).enumerate() {
            for z in 0..d {
                src[z] = f[z * plane + col];
            }
            envelope(&src, spacing[0], &mut out[j * d..(j + 1) * d], &mut scratch);
        }
        out
    });
    for (bi, out) in blocks.into_iter().enumerate() {
        let c0 = bi * BLOCK;
        for (j, col) in out.chunks(d).enumerate() {
            for z in 0..d {
                f[z * plane + c0 + j] = col[z];
            }
        }
    }
    Tensor::from_vec(&dims, f)
}

/// Distance from every voxel to the nearest `true` voxel, in spacing units.
pub fn euclidean_distance_transform(mask: &Tensor<bool>, spacing: Spacing) -> Result<Tensor<f64>> {
    Ok(squared_distance_transform(mask, spacing)?.map(f64::sqrt))
}

struct Scratch {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            sites: vec![0; n],
            bounds: vec![0.0; n + 1],
        }
    }
}

/// 1-D transform `out[p] = min_q (s·(p − q))² + f[q]` over finite `f[q]`.
fn envelope(f: &[f64], s: f64, out: &mut [f64], sc: &mut Scratch) {
    let n = f.len();
    let s2 = s * s;
    let mut k = 0usize;
    let mut any = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !any {
            sc.sites[0] = q;
            sc.bounds[0] = f64::NEG_INFINITY;
            sc.bounds[1] = f64::INFINITY;
            any = true;
            continue;
        }
        let fq = f[q] + s2 * (q * q) as f64;
        let cross = |r: usize| (fq - (f[r] + s2 * (r * r) as f64)) / (2.0 * s2 * (q - r) as f64);
        // bounds[0] is -inf, so this stops at k = 0 at the latest.
        let mut x = cross(sc.sites[k]);
        while x <= sc.bounds[k] {
            k -= 1;
            x = cross(sc.sites[k]);
        }
        k += 1;
        sc.sites[k] = q;
        sc.bounds[k] = x;
        sc.bounds[k + 1] = f64::INFINITY;
    }
    if !any {
        out.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while sc.bounds[j + 1] < p as f64 {
            j += 1;
        }
        let q = sc.sites[j];
        let dp = p.abs_diff(q) as f64 * s;
        *o = dp * dp + f[q];
    }
}
