use super::{feature_shape_like, split_feature_shape, Real, Tensor};
use crate::error::{shape_err, Result};
use crate::par::{self, Exec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub const UNIT: ConvGeometry = ConvGeometry {
        stride: [1, 1, 1],
        padding: [0, 0, 0],
    };

    /// Stride 1 with "same" padding for an odd cubic kernel.
    pub fn same(k: usize) -> Self {
        ConvGeometry {
            stride: [1, 1, 1],
            padding: [k / 2; 3],
        }
    }
}

struct Dims {
    b: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    ci: usize,
    co: usize,
}

fn conv_dims(input: &[usize], kernel: &[usize], geo: ConvGeometry) -> Result<Dims> {
    let (b, inp, ci) = split_feature_shape(input)?;
    let [kd, kh, kw, kci, co] = *kernel else {
        return Err(shape_err!(
            "conv kernel must be (kd,kh,kw,c_in,c_out), got {kernel:?}"
        ));
    };
    if kci != ci {
        return Err(shape_err!("conv kernel expects {kci} input channels, input has {ci}"));
    }
    let k = [kd, kh, kw];
    let mut out = [0usize; 3];
    for a in 0..3 {
        let s = geo.stride[a];
        if s == 0 {
            return Err(shape_err!("zero stride on axis {a}"));
        }
        let span = inp[a] + 2 * geo.padding[a];
        if span < k[a] || (span - k[a]) % s != 0 {
            return Err(shape_err!(
                "axis {a}: ({} + 2·{} − {}) / {s} + 1 is not a positive integer",
                inp[a],
                geo.padding[a],
                k[a]
            ));
        }
        out[a] = (span - k[a]) / s + 1;
    }
    Ok(Dims { b, inp, out, k, ci, co })
}

/// Input coordinate for output `o` and kernel tap `k`, if inside the volume.
#[inline]
fn src_index(o: usize, k: usize, s: usize, p: usize, n: usize) -> Option<usize> {
    let i = (o * s + k) as isize - p as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// Output coordinate reading input `i` through kernel tap `k`, if any.
#[inline]
fn dst_index(i: usize, k: usize, s: usize, p: usize, n_out: usize) -> Option<usize> {
    let num = i as isize + p as isize - k as isize;
    if num < 0 || num as usize % s != 0 {
        return None;
    }
    let o = num as usize / s;
    (o < n_out).then_some(o)
}

/// 3-D cross-correlation (no kernel flip) with zero padding.
pub fn conv3d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, geo: ConvGeometry) -> Result<Tensor<T>> {
    conv3d_with(Exec::auto(), input, kernel, geo)
}

pub fn conv3d_with<T: Real>(
    exec: Exec,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let Dims { b, inp, out, k, ci, co } = conv_dims(input.shape(), kernel.shape(), geo)?;
    let (x, wt) = (input.data(), kernel.data());
    let mut y = vec![T::zero(); b * out[0] * out[1] * out[2] * co];
    let row_len = out[2] * co;
    par::for_each_chunk(exec, &mut y, row_len, |row, yrow| {
        let oy = row % out[1];
        let oz = (row / out[1]) % out[0];
        let bi = row / (out[1] * out[0]);
        for kz in 0..k[0] {
            let Some(iz) = src_index(oz, kz, geo.stride[0], geo.padding[0], inp[0]) else {
                continue;
            };
            for ky in 0..k[1] {
                let Some(iy) = src_index(oy, ky, geo.stride[1], geo.padding[1], inp[1]) else {
                    continue;
                };
                let xbase = ((bi * inp[0] + iz) * inp[1] + iy) * inp[2];
                for kx in 0..k[2] {
                    let wbase = ((kz * k[1] + ky) * k[2] + kx) * ci * co;
                    let wtap = &wt[wbase..wbase + ci * co];
                    for ox in 0..out[2] {
                        let Some(ix) = src_index(ox, kx, geo.stride[2], geo.padding[2], inp[2])
                        else {
                            continue;
                        };
                        let xv = &x[(xbase + ix) * ci..(xbase + ix + 1) * ci];
                        let yv = &mut yrow[ox * co..(ox + 1) * co];
                        for (c, &v) in xv.iter().enumerate() {
                            for (o, &w) in yv.iter_mut().zip(&wtap[c * co..(c + 1) * co]) {
                                *o += v * w;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&feature_shape_like(input.shape(), b, out, co), y)
}

/// Gradient of the loss w.r.t. the conv input, given the output gradient.
pub fn conv3d_backward_input<T: Real>(
    exec: Exec,
    input_shape: &[usize],
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let Dims { b, inp, out, k, ci, co } = conv_dims(input_shape, kernel.shape(), geo)?;
    let (wt, dy) = (kernel.data(), grad_out.data());
    if dy.len() != b * out[0] * out[1] * out[2] * co {
        return Err(shape_err!("conv output gradient has wrong size"));
    }
    let mut dx = vec![T::zero(); b * inp[0] * inp[1] * inp[2] * ci];
    let row_len = inp[2] * ci;
    par::for_each_chunk(exec, &mut dx, row_len, |row, dxrow| {
        let iy = row % inp[1];
        let iz = (row / inp[1]) % inp[0];
        let bi = row / (inp[1] * inp[0]);
        for kz in 0..k[0] {
            let Some(oz) = dst_index(iz, kz, geo.stride[0], geo.padding[0], out[0]) else {
                continue;
            };
            for ky in 0..k[1] {
                let Some(oy) = dst_index(iy, ky, geo.stride[1], geo.padding[1], out[1]) else {
                    continue;
                };
                let ybase = ((bi * out[0] + oz) * out[1] + oy) * out[2];
                for kx in 0..k[2] {
                    let wbase = ((kz * k[1] + ky) * k[2] + kx) * ci * co;
                    let wtap = &wt[wbase..wbase + ci * co];
                    for ix in 0..inp[2] {
                        let Some(ox) = dst_index(ix, kx, geo.stride[2], geo.padding[2], out[2])
                        else {
                            continue;
                        };
                        let g = &dy[(ybase + ox) * co..(ybase + ox + 1) * co];
                        let d = &mut dxrow[ix * ci..(ix + 1) * ci];
                        for (c, dv) in d.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for (&w, &gv) in wtap[c * co..(c + 1) * co].iter().zip(g) {
                                acc += w * gv;
                            }
                            *dv += acc;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(input_shape, dx)
}

/// Gradient of the loss w.r.t. the conv kernel, given the output gradient.
pub fn conv3d_backward_kernel<T: Real>(
    exec: Exec,
    input: &Tensor<T>,
    kernel_shape: &[usize],
    grad_out: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let Dims { b, inp, out, k, ci, co } = conv_dims(input.shape(), kernel_shape, geo)?;
    let (x, dy) = (input.data(), grad_out.data());
    if dy.len() != b * out[0] * out[1] * out[2] * co {
        return Err(shape_err!("conv output gradient has wrong size"));
    }
    let mut dw = vec![T::zero(); k[0] * k[1] * k[2] * ci * co];
    par::for_each_chunk(exec, &mut dw, ci * co, |tap, dwtap| {
        let kx = tap % k[2];
        let ky = (tap / k[2]) % k[1];
        let kz = tap / (k[2] * k[1]);
        for bi in 0..b {
            for oz in 0..out[0] {
                let Some(iz) = src_index(oz, kz, geo.stride[0], geo.padding[0], inp[0]) else {
                    continue;
                };
                for oy in 0..out[1] {
                    let Some(iy) = src_index(oy, ky, geo.stride[1], geo.padding[1], inp[1])
                    else {
                        continue;
                    };
                    let xbase = ((bi * inp[0] + iz) * inp[1] + iy) * inp[2];
                    let ybase = ((bi * out[0] + oz) * out[1] + oy) * out[2];
                    for ox in 0..out[2] {
                        let Some(ix) = src_index(ox, kx, geo.stride[2], geo.padding[2], inp[2])
                        else {
                            continue;
                        };
                        let xv = &x[(xbase + ix) * ci..(xbase + ix + 1) * ci];
                        let g = &dy[(ybase + ox) * co..(ybase + ox + 1) * co];
                        for (c, &v) in xv.iter().enumerate() {
                            for (d, &gv) in dwtap[c * co..(c + 1) * co].iter_mut().zip(g) {
                                *d += v * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(kernel_shape, dw)
}
