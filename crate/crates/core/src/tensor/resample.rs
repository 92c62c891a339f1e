use super::{feature_shape_like, split_feature_shape, Real, Tensor};
use crate::error::{shape_err, Result};
use crate::par::{self, Exec};

/// Per-axis integer scale factors along (d, h, w).
pub type Factors = [usize; 3];

/// Max pooling over non-overlapping `f` blocks. Returns the pooled tensor and,
/// per output element, the linear input index that won (first in scan order on ties).
pub fn max_pool3d<T: Real>(input: &Tensor<T>, f: Factors) -> Result<(Tensor<T>, Vec<u32>)> {
    let (b, sp, c) = split_feature_shape(input.shape())?;
    for a in 0..3 {
        if f[a] == 0 || sp[a] % f[a] != 0 {
            return Err(shape_err!(
                "max pool factor {} does not divide extent {} on axis {a}",
                f[a],
                sp[a]
            ));
        }
    }
    let out = [sp[0] / f[0], sp[1] / f[1], sp[2] / f[2]];
    let x = input.data();
    let n_out = b * out[0] * out[1] * out[2];
    let mut y = vec![T::neg_infinity(); n_out * c];
    let mut arg = vec![0u32; n_out * c];
    for bi in 0..b {
        for oz in 0..out[0] {
            for oy in 0..out[1] {
                for ox in 0..out[2] {
                    let o = ((bi * out[0] + oz) * out[1] + oy) * out[2] + ox;
                    for dz in 0..f[0] {
                        for dy in 0..f[1] {
                            for dx in 0..f[2] {
                                let (z, yy, xx) = (oz * f[0] + dz, oy * f[1] + dy, ox * f[2] + dx);
                                let i = ((bi * sp[0] + z) * sp[1] + yy) * sp[2] + xx;
                                for ch in 0..c {
                                    let v = x[i * c + ch];
                                    if v > y[o * c + ch] {
                                        y[o * c + ch] = v;
                                        arg[o * c + ch] = (i * c + ch) as u32;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&feature_shape_like(input.shape(), b, out, c), y)?, arg))
}

pub fn max_pool3d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape)?;
    if argmax.len() != grad_out.len() {
        return Err(shape_err!("max pool argmax/gradient length mismatch"));
    }
    // windows do not overlap, so every input receives from at most one output
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i as usize] += g;
    }
    Ok(dx)
}

pub fn maxpool3d_222<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(max_pool3d(input, [2, 2, 2])?.0)
}

/// For each output index, the (input index, weight) pairs of linear
/// interpolation with half-pixel centers (align-corners = false).
fn axis_taps<T: Real>(n: usize, f: usize) -> Vec<Vec<(usize, T)>> {
    (0..n * f)
        .map(|o| {
            if f == 1 {
                return vec![(o, T::one())];
            }
            let src = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let lam = src - i0 as f64;
            if i0 == i1 || lam == 0.0 {
                vec![(i0, T::one())]
            } else {
                vec![(i0, T::of(1.0 - lam)), (i1, T::of(lam))]
            }
        })
        .collect()
}

fn transpose_taps<T: Real>(taps: &[Vec<(usize, T)>], n_in: usize) -> Vec<Vec<(usize, T)>> {
    let mut out = vec![Vec::new(); n_in];
    for (o, row) in taps.iter().enumerate() {
        for &(i, w) in row {
            out[i].push((o, w));
        }
    }
    out
}

/// Applies a sparse linear map along one spatial axis (1..=3 of a rank-5 view).
fn resample_axis<T: Real>(
    data: &[T],
    dims: [usize; 5],
    axis: usize,
    taps: &[Vec<(usize, T)>],
) -> (Vec<T>, [usize; 5]) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let (n_in, n_out) = (dims[axis], taps.len());
    let mut out = vec![T::zero(); outer * n_out * inner];
    par::for_each_chunk(Exec::auto(), &mut out, n_out * inner, |o, block| {
        let src = &data[o * n_in * inner..(o + 1) * n_in * inner];
        for (j, row) in taps.iter().enumerate() {
            let dst = &mut block[j * inner..(j + 1) * inner];
            for &(i, w) in row {
                for (d, &s) in dst.iter_mut().zip(&src[i * inner..(i + 1) * inner]) {
                    *d += w * s;
                }
            }
        }
    });
    let mut nd = dims;
    nd[axis] = n_out;
    (out, nd)
}

/// Trilinear upsampling by integer factors per axis, align-corners = false.
pub fn trilinear_upsample<T: Real>(input: &Tensor<T>, f: Factors) -> Result<Tensor<T>> {
    let (b, sp, c) = split_feature_shape(input.shape())?;
    if f.contains(&0) {
        return Err(shape_err!("upsample factors must be positive, got {f:?}"));
    }
    let mut dims = [b, sp[0], sp[1], sp[2], c];
    let mut data = input.data().to_vec();
    for a in 0..3 {
        if f[a] > 1 {
            let taps = axis_taps::<T>(dims[a + 1], f[a]);
            (data, dims) = resample_axis(&data, dims, a + 1, &taps);
        }
    }
    let out = [dims[1], dims[2], dims[3]];
    Tensor::from_vec(&feature_shape_like(input.shape(), b, out, c), data)
}

pub fn trilinear_upsample_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    f: Factors,
) -> Result<Tensor<T>> {
    let (b, sp, c) = split_feature_shape(input_shape)?;
    let (_, osp, _) = split_feature_shape(grad_out.shape())?;
    let mut dims = [b, osp[0], osp[1], osp[2], c];
    let mut data = grad_out.data().to_vec();
    for a in (0..3).rev() {
        if f[a] > 1 {
            let taps = transpose_taps(&axis_taps::<T>(sp[a], f[a]), sp[a]);
            (data, dims) = resample_axis(&data, dims, a + 1, &taps);
        }
    }
    Tensor::from_vec(input_shape, data)
}

pub fn trilinear_upsample_2x<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    trilinear_upsample(input, [2, 2, 2])
}
