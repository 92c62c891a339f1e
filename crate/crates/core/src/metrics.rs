//! Voxel-wise detection metrics and the CREMI distance score.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::labels::{euclidean_distance_transform, Spacing};
use crate::tensor::{Real, Tensor};

fn same_shape<A: Copy, B: Copy>(a: &Tensor<A>, b: &Tensor<B>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// `score ≥ threshold`.
pub fn binarize<T: Real>(scores: &Tensor<T>, threshold: f64) -> Tensor<bool> {
    scores.map(|s| s.to_f64() >= threshold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(pred: &Tensor<bool>, gt: &Tensor<bool>) -> Result<Confusion> {
    same_shape(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

impl Confusion {
    /// `(precision, recall, F1)`; a zero denominator yields 0.
    pub fn scores(&self) -> (f64, f64, f64) {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        (precision, recall, f1)
    }
}

/// `(precision, recall, F1)` of a binary prediction.
pub fn f1_score(pred: &Tensor<bool>, gt: &Tensor<bool>) -> Result<(f64, f64, f64)> {
    Ok(confusion(pred, gt)?.scores())
}

/// Area under the ROC curve via the rank statistic; tied scores count ½.
pub fn roc_auc<T: Real>(scores: &Tensor<T>, gt: &Tensor<bool>) -> Result<f64> {
    same_shape(scores, gt)?;
    let n = scores.len();
    let pos = gt.data().iter().filter(|&&g| g).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined);
    }
    let s: Vec<f64> = scores.data().iter().map(|&v| v.to_f64()).collect();
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN score in AUC".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, in half units.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && s[order[j]] == s[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u128;
        let k = order[i..j].iter().filter(|&&o| gt.data()[o]).count() as u128;
        twice_rank_sum += k * twice_mid;
        i = j;
    }
    let (p, q) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * q) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CremiScore {
    /// Mean distance from predicted cleft voxels to the ground truth.
    pub adgt: f64,
    /// Mean distance from ground-truth cleft voxels to the prediction.
    pub adf: f64,
    pub score: f64,
    /// Exactly one of the masks was empty and the penalty was applied.
    pub degenerate: bool,
}

/// Diagonal of the volume's physical bounding box.
pub fn default_penalty(shape: &[usize], spacing: Spacing) -> f64 {
    shape
        .iter()
        .zip(spacing)
        .map(|(&n, s)| (n as f64 * s).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn mean_distance(from: &Tensor<bool>, to: &Tensor<bool>, spacing: Spacing) -> Result<f64> {
    let dist = euclidean_distance_transform(to, spacing)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (&m, &d) in from.data().iter().zip(dist.data()) {
        if m {
            sum += d;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// ADGT, ADF and their mean. Both masks empty scores 0; if only one is empty
/// its undefined side is replaced by `penalty` (default: volume diagonal) and
/// the other side is 0.
pub fn cremi_score(pred: &Tensor<bool>, gt: &Tensor<bool>, spacing: Spacing, penalty: Option<f64>) -> Result<CremiScore> {
    same_shape(pred, gt)?;
    let any = |t: &Tensor<bool>| t.data().iter().any(|&m| m);
    let penalty = penalty.unwrap_or_else(|| default_penalty(pred.shape(), spacing));
    let (adgt, adf, degenerate) = match (any(pred), any(gt)) {
        (false, false) => (0.0, 0.0, false),
        (false, true) => (0.0, penalty, true),
        (true, false) => (penalty, 0.0, true),
        (true, true) => (mean_distance(pred, gt, spacing)?, mean_distance(gt, pred, spacing)?, false),
    };
    Ok(CremiScore {
        adgt,
        adf,
        score: (adgt + adf) / 2.0,
        degenerate,
    })
}

/// Full evaluation of one prediction against one ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "TP")]
    pub tp: u64,
    #[serde(rename = "FP")]
    pub fp: u64,
    #[serde(rename = "FN")]
    pub fn_: u64,
    #[serde(rename = "TN")]
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    /// `None` when the ground truth holds a single class.
    #[serde(rename = "AUC")]
    pub auc: Option<f64>,
    #[serde(rename = "ADGT")]
    pub adgt: f64,
    #[serde(rename = "ADF")]
    pub adf: f64,
    #[serde(rename = "CREMI-score")]
    pub cremi_score: f64,
    pub threshold: f64,
}

impl MetricReport {
    pub fn compute<T: Real>(
        scores: &Tensor<T>,
        gt: &Tensor<bool>,
        threshold: f64,
        spacing: Spacing,
        penalty: Option<f64>,
    ) -> Result<Self> {
        let pred = binarize(scores, threshold);
        let c = confusion(&pred, gt)?;
        let (precision, recall, f1) = c.scores();
        let auc = match roc_auc(scores, gt) {
            Ok(a) => Some(a),
            Err(Error::AucUndefined) => None,
            Err(e) => return Err(e),
        };
        let cs = cremi_score(&pred, gt, spacing, penalty)?;
        Ok(Self {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            precision,
            recall,
            f1,
            auc,
            adgt: cs.adgt,
            adf: cs.adf,
            cremi_score: cs.score,
            threshold,
        })
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let auc = self.auc.map_or("undefined".to_string(), |a| a.to_string());
        format!(
            "TP: {}\nFP: {}\nFN: {}\nTN: {}\nprecision: {}\nrecall: {}\nF1: {}\nAUC: {}\nADGT: {}\nADF: {}\nCREMI-score: {}\nthreshold: {}\n",
            self.tp,
            self.fp,
            self.fn_,
            self.tn,
            self.precision,
            self.recall,
            self.f1,
            auc,
            self.adgt,
            self.adf,
            self.cremi_score,
            self.threshold
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
