mod common;

use cleftnet::metrics::{confusion, cremi_score, default_penalty, f1_score, roc_auc, MetricReport};
use cleftnet::{Error, Tensor};
use common::{pair_auc, pairwise_mean_distance, random_mask, rng};
use proptest::prelude::*;
use rand::Rng;

fn points(shape: &[usize], on: &[[usize; 3]]) -> Tensor<bool> {
    Tensor::from_fn(shape, |i| on.iter().any(|p| p[..] == *i)).unwrap()
}

#[test]
fn cremi_matches_pairwise_oracle() {
    let mut r = rng(7);
    let mut checked = 0;
    while checked < 80 {
        let gt = random_mask(&mut r, 12, 0.05);
        let pred = Tensor::from_vec(gt.shape(), (0..gt.len()).map(|_| r.random_bool(0.05)).collect()).unwrap();
        if !gt.data().iter().any(|&m| m) || !pred.data().iter().any(|&m| m) {
            continue;
        }
        for spacing in [[1.0; 3], [40.0, 4.0, 4.0]] {
            let c = cremi_score(&pred, &gt, spacing, None).unwrap();
            let adgt = pairwise_mean_distance(&pred, &gt, spacing);
            let adf = pairwise_mean_distance(&gt, &pred, spacing);
            assert!((c.adgt - adgt).abs() <= 1e-9 && (c.adf - adf).abs() <= 1e-9);
            assert!((c.score - (adgt + adf) / 2.0).abs() <= 1e-9);
            assert!(!c.degenerate);
        }
        checked += 1;
    }
}

#[test]
fn cremi_worked_examples() {
    let gt = points(&[1, 1, 4], &[[0, 0, 0]]);
    let c = cremi_score(&points(&[1, 1, 4], &[[0, 0, 2]]), &gt, [1.0; 3], None).unwrap();
    assert_eq!((c.adgt, c.adf, c.score), (2.0, 2.0, 2.0));
    let c = cremi_score(&points(&[1, 1, 4], &[[0, 0, 0], [0, 0, 3]]), &gt, [1.0; 3], None).unwrap();
    assert_eq!((c.adgt, c.adf, c.score), (1.5, 0.0, 0.75));
}

#[test]
fn empty_masks_use_the_penalty_convention() {
    let empty = Tensor::full(&[2, 3, 4], false).unwrap();
    let one = points(&[2, 3, 4], &[[1, 1, 1]]);
    assert_eq!(cremi_score(&empty, &empty, [1.0; 3], None).unwrap().score, 0.0);
    let diag = default_penalty(&[2, 3, 4], [40.0, 4.0, 4.0]);
    assert!((diag - (80f64 * 80.0 + 144.0 + 256.0).sqrt()).abs() < 1e-12);
    let missed = cremi_score(&empty, &one, [40.0, 4.0, 4.0], None).unwrap();
    assert!(missed.degenerate);
    assert_eq!((missed.adgt, missed.adf), (0.0, diag));
    let spurious = cremi_score(&one, &empty, [1.0; 3], Some(5.0)).unwrap();
    assert_eq!((spurious.adgt, spurious.adf, spurious.score), (5.0, 0.0, 2.5));
}

#[test]
fn auc_matches_pair_enumeration_exactly() {
    let mut r = rng(11);
    let mut checked = 0;
    while checked < 200 {
        let n = r.random_range(2..=100);
        // Coarse scores so that ties are common.
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64 / 8.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let s = Tensor::from_vec(&[n], scores.clone()).unwrap();
        let g = Tensor::from_vec(&[n], labels.clone()).unwrap();
        assert_eq!(roc_auc(&s, &g).unwrap(), pair_auc(&scores, &labels), "case {checked}");
        checked += 1;
    }
}

#[test]
fn auc_worked_example_and_single_class() {
    let s = Tensor::from_vec(&[4], vec![0.9, 0.8, 0.7, 0.6]).unwrap();
    let g = Tensor::from_vec(&[4], vec![true, false, true, false]).unwrap();
    assert_eq!(roc_auc(&s, &g).unwrap(), 0.75);
    let all = Tensor::full(&[4], false).unwrap();
    assert!(matches!(roc_auc(&s, &all), Err(Error::AucUndefined)));
    let r = MetricReport::compute(&s, &all, 0.5, [1.0; 3], None).unwrap();
    assert_eq!(r.auc, None);
    assert!(r.to_text().contains("AUC: undefined"));
}

#[test]
fn f1_worked_example() {
    let gt = Tensor::from_vec(&[4], vec![true, true, false, false]).unwrap();
    let pred = Tensor::from_vec(&[4], vec![true, false, true, false]).unwrap();
    assert_eq!(f1_score(&pred, &gt).unwrap(), (0.5, 0.5, 0.5));
    let c = confusion(&pred, &gt).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
}

#[test]
fn report_on_identical_masks_is_perfect() {
    let gt = points(&[2, 4, 4], &[[0, 1, 1], [1, 2, 3]]);
    let scores = gt.map(|m| if m { 0.9f32 } else { 0.1 });
    let r = MetricReport::compute(&scores, &gt, 0.5, [40.0, 4.0, 4.0], None).unwrap();
    assert_eq!((r.f1, r.auc, r.cremi_score), (1.0, Some(1.0), 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cremi_is_symmetric_under_swap(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_mask(&mut r, 6, 0.2);
        let b = Tensor::from_vec(a.shape(), (0..a.len()).map(|_| r.random_bool(0.2)).collect()).unwrap();
        let ab = cremi_score(&a, &b, [1.0; 3], Some(9.0)).unwrap();
        let ba = cremi_score(&b, &a, [1.0; 3], Some(9.0)).unwrap();
        prop_assert_eq!((ab.adgt, ab.adf), (ba.adf, ba.adgt));
    }

    #[test]
    fn auc_is_invariant_to_monotone_rescaling(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let labels: Vec<bool> = (0..n).map(|i| i == 0 || (i > 1 && r.random_bool(0.5))).collect();
        let g = Tensor::from_vec(&[n], labels).unwrap();
        let a = roc_auc(&Tensor::from_vec(&[n], scores.clone()).unwrap(), &g).unwrap();
        let b = roc_auc(&Tensor::from_vec(&[n], scores.iter().map(|s| 3.0 * s + 1.0).collect()).unwrap(), &g).unwrap();
        let flipped = roc_auc(&Tensor::from_vec(&[n], scores.iter().map(|s| -s).collect()).unwrap(), &g).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((a + flipped - 1.0).abs() < 1e-12);
    }
}
