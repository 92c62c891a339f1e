mod common;

use cleftnet::labels::{euclidean_distance_transform, squared_distance_transform, tanh_distance_map};
use cleftnet::{Error, Tensor};
use common::{brute_sq_distance, brute_tanh_map, random_mask, rng};
use proptest::prelude::*;

fn nonempty_mask(seed: u64, max: usize, density: f64) -> Tensor<bool> {
    let mut r = rng(seed);
    loop {
        let m = random_mask(&mut r, max, density);
        if m.data().iter().any(|&v| v) {
            return m;
        }
    }
}

#[test]
fn squared_distances_equal_brute_force_exactly() {
    for seed in 0..60 {
        let m = nonempty_mask(seed, 9, 0.05 + 0.3 * (seed % 4) as f64 / 4.0);
        let fast = squared_distance_transform(&m, [1.0; 3]).unwrap();
        assert_eq!(fast.data(), &brute_sq_distance(&m, [1.0; 3])[..], "seed {seed} shape {:?}", m.shape());
    }
}

#[test]
fn anisotropic_distances_match_brute_force() {
    for seed in 0..30 {
        let m = nonempty_mask(1000 + seed, 8, 0.1);
        let fast = squared_distance_transform(&m, [40.0, 4.0, 4.0]).unwrap();
        for (a, b) in fast.data().iter().zip(brute_sq_distance(&m, [40.0, 4.0, 4.0])) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn single_target_examples() {
    let m = Tensor::from_fn(&[2, 2, 3], |i| i == [0, 0, 0]).unwrap();
    let d = euclidean_distance_transform(&m, [1.0; 3]).unwrap();
    assert_eq!(d.get(&[0, 0, 2]), 2.0);
    assert_eq!(d.get(&[1, 1, 1]), 3f64.sqrt());
    let d = euclidean_distance_transform(&m, [40.0, 4.0, 4.0]).unwrap();
    assert_eq!(d.get(&[1, 0, 0]), 40.0);
}

#[test]
fn empty_target_is_an_error() {
    let m = Tensor::full(&[2, 3, 4], false).unwrap();
    assert!(matches!(squared_distance_transform(&m, [1.0; 3]), Err(Error::EmptyTarget)));
}

#[test]
fn tanh_map_matches_brute_force() {
    for seed in 0..60 {
        let m = nonempty_mask(2000 + seed, 9, 0.4);
        if m.data().iter().all(|&v| v) {
            continue;
        }
        let fast = tanh_distance_map(&m).unwrap();
        for (a, b) in fast.data().iter().zip(brute_tanh_map(&m)) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn tanh_map_line_example() {
    let m = Tensor::from_fn(&[1, 1, 7], |i| (2..=4).contains(&i[2])).unwrap();
    let t = tanh_distance_map(&m).unwrap();
    let (t1, t2) = (1f64.tanh(), 2f64.tanh());
    let want = [0.0, 0.0, t1, t2, t1, 0.0, 0.0];
    for (a, b) in t.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((t1 - 0.76159).abs() < 1e-5 && (t2 - 0.96403).abs() < 1e-5);
}

#[test]
fn tanh_map_of_all_foreground_is_an_error() {
    let m = Tensor::full(&[2, 2, 2], true).unwrap();
    assert!(tanh_distance_map(&m).is_err());
    let empty = Tensor::full(&[2, 2, 2], false).unwrap();
    assert!(tanh_distance_map(&empty).unwrap().data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_is_zero_exactly_on_target(seed in any::<u64>()) {
        let m = nonempty_mask(seed, 7, 0.2);
        let d = squared_distance_transform(&m, [1.0; 3]).unwrap();
        for (&v, &on) in d.data().iter().zip(m.data()) {
            prop_assert_eq!(v == 0.0, on);
        }
    }

    #[test]
    fn distance_is_one_lipschitz_along_axes(seed in any::<u64>()) {
        let m = nonempty_mask(seed, 7, 0.15);
        let d = euclidean_distance_transform(&m, [1.0; 3]).unwrap();
        let s = m.shape().to_vec();
        for z in 0..s[0] {
            for y in 0..s[1] {
                for x in 0..s[2] {
                    let here = d.get(&[z, y, x]);
                    for n in [[z + 1, y, x], [z, y + 1, x], [z, y, x + 1]] {
                        if n[0] < s[0] && n[1] < s[1] && n[2] < s[2] {
                            prop_assert!((here - d.get(&n)).abs() <= 1.0 + 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn tanh_map_lies_in_unit_interval_and_is_positive_on_foreground(seed in any::<u64>()) {
        let m = nonempty_mask(seed, 7, 0.5);
        prop_assume!(m.data().iter().any(|&v| !v));
        let t = tanh_distance_map(&m).unwrap();
        for (&v, &on) in t.data().iter().zip(m.data()) {
            prop_assert!((0.0..1.0).contains(&v));
            prop_assert_eq!(v > 0.0, on);
        }
    }
}
