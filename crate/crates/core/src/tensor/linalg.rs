use super::{Real, Tensor};
use crate::error::{shape_err, Result};
use crate::par::{self, Exec};

fn matrix_dims<T>(m: &Tensor<T>) -> Result<(usize, usize)>
where
    T: Copy,
{
    match *m.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(shape_err!("expected a matrix, got shape {s:?}")),
    }
}

/// Mode-4 unfolding of a `(d,h,w,c)` tensor into a `c × (d·h·w)` matrix whose
/// column `j` is the channel vector of voxel `j` (voxels in row-major order).
pub fn matricize_mode4<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [d, h, w, c] = *t.shape() else {
        return Err(shape_err!(
            "mode-4 matricization needs a rank-4 tensor, got {:?}",
            t.shape()
        ));
    };
    let s = d * h * w;
    let src = t.data();
    let mut out = vec![T::zero(); s * c];
    for j in 0..s {
        for k in 0..c {
            out[k * s + j] = src[j * c + k];
        }
    }
    Tensor::from_vec(&[c, s], out)
}

/// Inverse of [`matricize_mode4`] for the given spatial extents.
pub fn dematricize_mode4<T: Real>(m: &Tensor<T>, spatial: [usize; 3]) -> Result<Tensor<T>> {
    let (c, s) = matrix_dims(m)?;
    let [d, h, w] = spatial;
    if d * h * w != s {
        return Err(shape_err!(
            "cannot fold {c}×{s} matrix into spatial extents {spatial:?}"
        ));
    }
    let src = m.data();
    let mut out = vec![T::zero(); s * c];
    for j in 0..s {
        for k in 0..c {
            out[j * c + k] = src[k * s + j];
        }
    }
    Tensor::from_vec(&[d, h, w, c], out)
}

pub fn identity<T: Real>(n: usize) -> Result<Tensor<T>> {
    Tensor::from_fn(&[n, n], |i| if i[0] == i[1] { T::one() } else { T::zero() })
}

pub fn transpose<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = matrix_dims(m)?;
    let src = m.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_with(Exec::auto(), a, b)
}

/// Row-parallel matrix product; each output row accumulates over `k` in order.
pub fn matmul_with<T: Real>(exec: Exec, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a)?;
    let (k2, n) = matrix_dims(b)?;
    if k != k2 {
        return Err(shape_err!("matmul inner extents differ: {m}×{k} · {k2}×{n}"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk(exec, &mut out, n, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Tensor::from_vec(&[m, n], out)
}

/// Softmax of a slice with max-shift, written into `out`.
pub(crate) fn softmax_into<T: Real>(x: impl Iterator<Item = T> + Clone, out: &mut [T]) {
    let mx = x.clone().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        total += *o;
    }
    let inv = T::one() / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Replaces each column by its softmax.
pub fn softmax_columns<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = matrix_dims(m)?;
    if !m.all_finite() {
        return Err(crate::Error::Numerical("softmax of non-finite input".into()));
    }
    let src = m.data();
    let mut out = vec![T::zero(); r * c];
    let mut col = vec![T::zero(); r];
    for j in 0..c {
        softmax_into((0..r).map(|i| src[i * c + j]), &mut col);
        for i in 0..r {
            out[i * c + j] = col[i];
        }
    }
    Tensor::from_vec(&[r, c], out)
}

pub fn softmax_vector<T: Real>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let [n] = *v.shape() else {
        return Err(shape_err!("expected a vector, got {:?}", v.shape()));
    };
    let col = softmax_columns(&v.clone().reshape(&[n, 1])?)?;
    col.reshape(&[n])
}
