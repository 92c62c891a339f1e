//! Class-balanced losses for the segmentation and boundary outputs.
//!
//! All losses are sums over voxels divided by the batch size. Probabilities
//! are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` before any logarithm.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

/// Predicted boundary values above this count as "on a cleft" for the
/// coherence loss: half the smallest positive target, `tanh(1) / 2`.
pub const BOUNDARY_THRESHOLD: f64 = 0.380_797_077_977_882_4;

/// How the coherence loss scores background-like voxels (predicted boundary
/// at or below [`BOUNDARY_THRESHOLD`]).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoherenceForm {
    /// `−(1 − ŷ_b) · ln P_s`: rewards a cleft prediction where no boundary
    /// is predicted, so background voxels are pulled towards `P_s = 1`.
    Literal,
    /// `−(1 − ŷ_b) · ln(1 − P_s)`: penalises a confident cleft prediction
    /// where no boundary is predicted.
    #[default]
    Complement,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the boundary loss.
    pub boundary: f64,
    /// Weight of the coherence loss.
    pub coherence: f64,
    pub coherence_form: CoherenceForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            boundary: 0.5,
            coherence: 0.2,
            coherence_form: CoherenceForm::Complement,
        }
    }
}

/// Recorded loss nodes; `boundary`/`coherence` are absent for
/// segmentation-only training.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub segmentation: Var,
    pub boundary: Option<Var>,
    pub coherence: Option<Var>,
}

fn check<T: Real>(g: &Graph<T>, v: Var, target: &Tensor<T>, what: &str) -> Result<()> {
    if g.shape(v) != target.shape() {
        return Err(shape_err!(
            "{what}: prediction {:?} vs target {:?}",
            g.shape(v),
            target.shape()
        ));
    }
    Ok(())
}

fn clamp_prob<T: Real>(g: &mut Graph<T>, p: Var) -> Var {
    g.clamp(p, T::of(PROB_CLAMP), T::of(1.0 - PROB_CLAMP))
}

fn fraction<T: Real>(t: &Tensor<T>, pred: impl Fn(T) -> bool) -> f64 {
    t.data().iter().filter(|&&v| pred(v)).count() as f64 / t.len() as f64
}

/// Weighted cross-entropy; the cleft term is weighted by the background fraction.
///
/// `p` holds cleft probabilities, `y_s` is 0/1, both shaped `(b, d, h, w)`.
pub fn segmentation_loss<T: Real>(g: &mut Graph<T>, p: Var, y_s: &Tensor<T>, batch: usize) -> Result<Var> {
    check(g, p, y_s, "segmentation loss")?;
    let beta = fraction(y_s, |v| v <= T::zero());
    let n = batch as f64;
    let pc = clamp_prob(g, p);
    let ln_p = g.ln(pc);
    let q = g.affine(pc, -T::one(), T::one());
    let ln_q = g.ln(q);
    let w_pos = y_s.map(|y| T::of(-beta / n) * y);
    let w_neg = y_s.map(|y| T::of(-(1.0 - beta) / n) * (T::one() - y));
    let a = g.weighted_sum(ln_p, w_pos)?;
    let b = g.weighted_sum(ln_q, w_neg)?;
    g.add(a, b)
}

/// Weighted squared error; voxels with a positive target are weighted by the
/// positive fraction, the rest by its complement.
pub fn boundary_loss<T: Real>(g: &mut Graph<T>, y_hat: Var, y_b: &Tensor<T>, batch: usize) -> Result<Var> {
    check(g, y_hat, y_b, "boundary loss")?;
    let beta = fraction(y_b, |v| v > T::zero());
    let n = batch as f64;
    let target = g.constant(y_b.clone());
    let r = g.sub(y_hat, target)?;
    let sq = g.mul(r, r)?;
    let w = y_b.map(|y| T::of(if y > T::zero() { beta / n } else { (1.0 - beta) / n }));
    g.weighted_sum(sq, w)
}

/// Agreement between the two outputs.
///
/// Voxels whose predicted boundary exceeds [`BOUNDARY_THRESHOLD`] contribute
/// `−(1 − P_s) ln ŷ_b`; the rest contribute per `form`.
pub fn coherence_loss<T: Real>(g: &mut Graph<T>, p: Var, y_hat: Var, batch: usize, form: CoherenceForm) -> Result<Var> {
    if g.shape(p) != g.shape(y_hat) {
        return Err(shape_err!("coherence loss: {:?} vs {:?}", g.shape(p), g.shape(y_hat)));
    }
    let n = T::of(batch as f64);
    let tau = T::of(BOUNDARY_THRESHOLD);
    let positive = g.value(y_hat).map(|v| v > tau);
    let pc = clamp_prob(g, p);
    let bc = clamp_prob(g, y_hat);

    let not_p = g.affine(pc, -T::one(), T::one());
    let ln_b = g.ln(bc);
    let first = g.mul(not_p, ln_b)?;
    let w1 = positive.map(|on| if on { -T::one() / n } else { T::zero() });
    let first = g.weighted_sum(first, w1)?;

    let not_b = g.affine(bc, -T::one(), T::one());
    let log_arg = match form {
        CoherenceForm::Literal => pc,
        CoherenceForm::Complement => not_p,
    };
    let ln_s = g.ln(log_arg);
    let second = g.mul(not_b, ln_s)?;
    let w2 = positive.map(|on| if on { T::zero() } else { -T::one() / n });
    let second = g.weighted_sum(second, w2)?;
    g.add(first, second)
}

/// `L_s + w_b·L_b + w_c·L_c`, or `L_s` alone when `y_b` is `None`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    p: Var,
    y_hat: Option<Var>,
    y_s: &Tensor<T>,
    y_b: Option<&Tensor<T>>,
    weights: &LossWeights,
    batch: usize,
) -> Result<LossTerms> {
    let seg = segmentation_loss(g, p, y_s, batch)?;
    let (Some(y_hat), Some(y_b)) = (y_hat, y_b) else {
        return Ok(LossTerms {
            total: seg,
            segmentation: seg,
            boundary: None,
            coherence: None,
        });
    };
    let lb = boundary_loss(g, y_hat, y_b, batch)?;
    let lc = coherence_loss(g, p, y_hat, batch, weights.coherence_form)?;
    let wb = g.scale(lb, T::of(weights.boundary));
    let wc = g.scale(lc, T::of(weights.coherence));
    let t = g.add(seg, wb)?;
    let total = g.add(t, wc)?;
    Ok(LossTerms {
        total,
        segmentation: seg,
        boundary: Some(lb),
        coherence: Some(lc),
    })
}
