use super::{Real, Tensor};
use crate::error::{shape_err, Result};

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics (biased variance) over `count` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

fn channels<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = *x.shape().last().ok_or_else(|| shape_err!("batchnorm of a scalar"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "batchnorm affine params must be ({c},), got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(c)
}

/// Training-mode batch normalization over every axis but the last.
///
/// Returns `(output, normalized input, per-channel 1/sqrt(var+eps), stats)`.
pub fn batchnorm_training<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>, BatchStats)> {
    let c = channels(x, gamma, beta)?;
    let n = x.len() / c;
    let mut mean = vec![0.0f64; c];
    for row in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; c];
    for row in x.data().chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    let (g, bt) = (gamma.data(), beta.data());
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (hrow, yrow) in xhat.data_mut().chunks_mut(c).zip(y.data_mut().chunks_mut(c)) {
        for k in 0..c {
            let h = (hrow[k] - mean_t[k]) * inv_std[k];
            hrow[k] = h;
            yrow[k] = g[k] * h + bt[k];
        }
    }
    Ok((y, xhat, inv_std, BatchStats { mean, var, count: n }))
}

pub fn batchnorm_inference<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
) -> Result<Tensor<T>> {
    let c = channels(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(shape_err!("running statistics must have {c} channels"));
    }
    let scale: Vec<T> = (0..c)
        .map(|k| gamma.data()[k] / (running_var[k] + T::of(BN_EPS)).sqrt())
        .collect();
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(c) {
        for k in 0..c {
            row[k] = (row[k] - running_mean[k]) * scale[k] + beta.data()[k];
        }
    }
    Ok(y)
}

/// Gradients `(dx, dgamma, dbeta)` of training-mode batchnorm.
pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = inv_std.len();
    let n = T::of((grad_out.len() / c) as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for (g, h) in grad_out.data().chunks(c).zip(xhat.data().chunks(c)) {
        for k in 0..c {
            sum_dy[k] += g[k];
            sum_dy_xhat[k] += g[k] * h[k];
        }
    }
    let mut dx = grad_out.clone();
    for (d, h) in dx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)) {
        for k in 0..c {
            let coef = gamma.data()[k] * inv_std[k] / n;
            d[k] = coef * (n * d[k] - sum_dy[k] - h[k] * sum_dy_xhat[k]);
        }
    }
    let dgamma = Tensor::from_vec(&[c], sum_dy_xhat).expect("c > 0");
    let dbeta = Tensor::from_vec(&[c], sum_dy).expect("c > 0");
    (dx, dgamma, dbeta)
}

/// ELU: `x` for `x ≥ 0`, `α(eˣ − 1)` otherwise.
pub fn elu<T: Real>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { alpha * v.exp_m1() })
}

/// ELU derivative expressed through the forward output.
pub fn elu_grad<T: Real>(y: T, alpha: T) -> T {
    if y >= T::zero() {
        T::one()
    } else {
        y + alpha
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}
