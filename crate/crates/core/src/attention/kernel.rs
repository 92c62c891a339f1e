//! Raw-slice kernels behind the attention and gate graph ops.

use crate::error::{shape_err, Result};
use crate::par::{self, Exec};
use crate::tensor::Real;

use crate::tensor::softmax_into;

/// Query rows per backward task.
const ROW_BLOCK: usize = 256;

/// Extents of one attention call: `b` batch items, `s` keys, `t` queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnDims {
    pub b: usize,
    pub bq: usize,
    pub s: usize,
    pub t: usize,
    pub ck: usize,
    pub cv: usize,
}

impl AttnDims {
    pub fn new(k: &[usize], v: &[usize], q: &[usize]) -> Result<Self> {
        let [b, s, ck] = *k else {
            return Err(shape_err!("keys must be (b, s, c_k), got {k:?}"));
        };
        let [bv, sv, cv] = *v else {
            return Err(shape_err!("values must be (b, s, c_v), got {v:?}"));
        };
        let [bq, t, cq] = *q else {
            return Err(shape_err!("queries must be (b, t, c_k), got {q:?}"));
        };
        if bv != b || sv != s {
            return Err(shape_err!("keys {k:?} and values {v:?} disagree"));
        }
        if cq != ck {
            return Err(shape_err!("query channels {cq} differ from key channels {ck}"));
        }
        if bq != 1 && bq != b {
            return Err(shape_err!("query batch {bq} must be 1 or {b}"));
        }
        Ok(Self { b, bq, s, t, ck, cv })
    }

    fn query_item(&self, bi: usize) -> usize {
        if self.bq == 1 {
            0
        } else {
            bi
        }
    }
}

/// Channel-major copy of an item-stacked `(b, n, c)` buffer: `(b, c, n)`.
fn channel_major<T: Real>(x: &[T], b: usize, n: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let (src, dst) = (&x[bi * n * c..(bi + 1) * n * c], &mut out[bi * n * c..(bi + 1) * n * c]);
        for (i, row) in src.chunks(c).enumerate() {
            for (ch, &v) in row.iter().enumerate() {
                dst[ch * n + i] = v;
            }
        }
    }
    out
}

/// Dot product with eight interleaved accumulators; the summation order
/// depends only on the length.
fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn sum_lanes<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let c = a.chunks_exact(8);
    let tail: T = c.remainder().iter().copied().sum();
    for x in c {
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// In-place softmax of one row.
fn softmax_row<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    row.iter_mut().for_each(|v| *v = (*v - mx).exp_nonpos());
    let inv = T::one() / sum_lanes(row);
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Returns `(z, a)` with `z: (b, t, c_v)` and the attention weights `a: (b, t, s)`.
pub(crate) fn forward<T: Real>(exec: Exec, d: &AttnDims, k: &[T], v: &[T], q: &[T]) -> (Vec<T>, Vec<T>) {
    let (s, t, ck, cv) = (d.s, d.t, d.ck, d.cv);
    let kt = channel_major(k, d.b, s, ck);
    let vt = channel_major(v, d.b, s, cv);
    let mut a = vec![T::zero(); d.b * t * s];
    let mut z = vec![T::zero(); d.b * t * cv];
    par::for_each_chunk_pair(exec, &mut a, s, &mut z, cv, |row, ar, zr| {
        let bi = row / t;
        let qi = d.query_item(bi) * t + row % t;
        let qv = &q[qi * ck..(qi + 1) * ck];
        let kb = &kt[bi * s * ck..(bi + 1) * s * ck];
        for (&w, kc) in qv.iter().zip(kb.chunks(s)) {
            axpy(w, kc, ar);
        }
        softmax_row(ar);
        let vb = &vt[bi * s * cv..(bi + 1) * s * cv];
        for (o, vc) in zr.iter_mut().zip(vb.chunks(s)) {
            *o = dot_lanes(ar, vc);
        }
    });
    (z, a)
}

/// Gradients `(dk, dv, dq)` given the cached weights and the output gradient.
///
/// Each block of query rows is handled in one pass: the score gradient of a
/// row lives only in a scratch buffer, and the key/value gradients of a block
/// are partial sums reduced afterwards in block order.
pub(crate) fn backward<T: Real>(
    exec: Exec,
    d: &AttnDims,
    k: &[T],
    v: &[T],
    q: &[T],
    a: &[T],
    dz: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (s, t, ck, cv) = (d.s, d.t, d.ck, d.cv);
    let kt = channel_major(k, d.b, s, ck);
    let vt = channel_major(v, d.b, s, cv);
    let blocks_per_item = t.div_ceil(ROW_BLOCK);
    let parts = par::map_indices(exec, d.b * blocks_per_item, |task| {
        let bi = task / blocks_per_item;
        let t0 = (task % blocks_per_item) * ROW_BLOCK;
        let t1 = (t0 + ROW_BLOCK).min(t);
        let kb = &kt[bi * s * ck..(bi + 1) * s * ck];
        let vb = &vt[bi * s * cv..(bi + 1) * s * cv];
        let qb = d.query_item(bi) * t;
        let mut dkt = vec![T::zero(); ck * s];
        let mut dvt = vec![T::zero(); cv * s];
        let mut dq = vec![T::zero(); (t1 - t0) * ck];
        let mut dsr = vec![T::zero(); s];
        for ti in t0..t1 {
            let row = bi * t + ti;
            let ar = &a[row * s..(row + 1) * s];
            let g = &dz[row * cv..(row + 1) * cv];
            dsr.fill(T::zero());
            for (&w, vc) in g.iter().zip(vb.chunks(s)) {
                axpy(w, vc, &mut dsr);
            }
            let dot = dot_lanes(ar, &dsr);
            for (o, &w) in dsr.iter_mut().zip(ar) {
                *o = w * (*o - dot);
            }
            for (o, kc) in dq[(ti - t0) * ck..(ti - t0 + 1) * ck].iter_mut().zip(kb.chunks(s)) {
                *o = dot_lanes(&dsr, kc);
            }
            let qv = &q[(qb + ti) * ck..(qb + ti + 1) * ck];
            for (&x, o) in qv.iter().zip(dkt.chunks_mut(s)) {
                axpy(x, &dsr, o);
            }
            for (&x, o) in g.iter().zip(dvt.chunks_mut(s)) {
                axpy(x, ar, o);
            }
        }
        (dkt, dvt, dq)
    });

    let mut dkt = vec![T::zero(); d.b * ck * s];
    let mut dvt = vec![T::zero(); d.b * cv * s];
    let mut dq_rows = Vec::with_capacity(d.b * t * ck);
    for (task, (pk, pv, pq)) in parts.into_iter().enumerate() {
        let bi = task / blocks_per_item;
        axpy(T::one(), &pk, &mut dkt[bi * ck * s..(bi + 1) * ck * s]);
        axpy(T::one(), &pv, &mut dvt[bi * cv * s..(bi + 1) * cv * s]);
        dq_rows.extend(pq);
    }
    let dq = if d.bq == 1 {
        let mut acc = vec![T::zero(); t * ck];
        for item in dq_rows.chunks(t * ck) {
            axpy(T::one(), item, &mut acc);
        }
        acc
    } else {
        dq_rows
    };
    (channel_major(&dkt, d.b, ck, s), channel_major(&dvt, d.b, cv, s), dq)
}

/// Spatial gate forward: returns `(y, a)` with `a: (b, s)`.
pub(crate) fn gate_spatial<T: Real>(x: &[T], q: &[T], b: usize, s: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let mut a = vec![T::zero(); b * s];
    for (xb, ab) in x.chunks(s * c).zip(a.chunks_mut(s)) {
        softmax_into(xb.chunks(c).map(|m| dot(m, q)), ab);
    }
    let mut y = x.to_vec();
    for (row, &w) in y.chunks_mut(c).zip(&a) {
        row.iter_mut().for_each(|v| *v *= w);
    }
    (y, a)
}

pub(crate) fn gate_spatial_backward<T: Real>(
    x: &[T],
    q: &[T],
    a: &[T],
    dy: &[T],
    b: usize,
    s: usize,
    c: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dq = vec![T::zero(); c];
    for bi in 0..b {
        let r = bi * s * c..(bi + 1) * s * c;
        let (xb, gb, ab) = (&x[r.clone()], &dy[r.clone()], &a[bi * s..(bi + 1) * s]);
        let da: Vec<T> = xb.chunks(c).zip(gb.chunks(c)).map(|(m, g)| dot(m, g)).collect();
        let mean: T = ab.iter().zip(&da).map(|(&w, &g)| w * g).sum();
        for (i, (m, g)) in xb.chunks(c).zip(gb.chunks(c)).enumerate() {
            let dscore = ab[i] * (da[i] - mean);
            let out = &mut dx[r.start + i * c..r.start + (i + 1) * c];
            for j in 0..c {
                out[j] = ab[i] * g[j] + dscore * q[j];
                dq[j] += dscore * m[j];
            }
        }
    }
    (dx, dq)
}

/// Channel gate forward: returns `(y, a)` with `a: (b, c)`.
pub(crate) fn gate_channel<T: Real>(x: &[T], q: &[T], b: usize, s: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let mut a = vec![T::zero(); b * c];
    for (xb, ab) in x.chunks(s * c).zip(a.chunks_mut(c)) {
        let mut scores = vec![T::zero(); c];
        for (m, &w) in xb.chunks(c).zip(q) {
            for (o, &v) in scores.iter_mut().zip(m) {
                *o += v * w;
            }
        }
        softmax_into(scores.into_iter(), ab);
    }
    let mut y = x.to_vec();
    for (bi, yb) in y.chunks_mut(s * c).enumerate() {
        let ab = &a[bi * c..(bi + 1) * c];
        for row in yb.chunks_mut(c) {
            row.iter_mut().zip(ab).for_each(|(v, &w)| *v *= w);
        }
    }
    (y, a)
}

pub(crate) fn gate_channel_backward<T: Real>(
    x: &[T],
    q: &[T],
    a: &[T],
    dy: &[T],
    b: usize,
    s: usize,
    c: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dq = vec![T::zero(); s];
    for bi in 0..b {
        let r = bi * s * c..(bi + 1) * s * c;
        let (xb, gb, ab) = (&x[r.clone()], &dy[r.clone()], &a[bi * c..(bi + 1) * c]);
        let mut da = vec![T::zero(); c];
        for (m, g) in xb.chunks(c).zip(gb.chunks(c)) {
            for j in 0..c {
                da[j] += m[j] * g[j];
            }
        }
        let mean: T = ab.iter().zip(&da).map(|(&w, &g)| w * g).sum();
        let dscore: Vec<T> = (0..c).map(|j| ab[j] * (da[j] - mean)).collect();
        for (i, (m, g)) in xb.chunks(c).zip(gb.chunks(c)).enumerate() {
            let out = &mut dx[r.start + i * c..r.start + (i + 1) * c];
            for j in 0..c {
                out[j] = ab[j] * g[j] + dscore[j] * q[i];
            }
            dq[i] += dot(m, &dscore);
        }
    }
    (dx, dq)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
