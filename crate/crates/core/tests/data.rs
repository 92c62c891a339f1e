mod common;

use cleftnet::data::augment::{flip, rotate};
use cleftnet::data::{
    read_vol1, synthesize, train_val_split, write_vol1, AugmentProbs, Rejection, Sampler, SynthConfig, Vol1, Vol1Data,
    Volume,
};
use cleftnet::labels::tanh_distance_map;
use cleftnet::{Error, Tensor};
use common::{random_mask, rng};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn draws_until_acceptance_are_geometric_with_mean_twenty() {
    let empty = Volume::new("empty", Tensor::full(&[4, 16, 16], 128).unwrap(), Tensor::full(&[4, 16, 16], false).unwrap(), [1.0; 3]).unwrap();
    let mut s = Sampler::new(empty, [2, 8, 8], Rejection::default(), AugmentProbs::NONE, 123).unwrap();
    let trials = 10_000;
    let total: usize = (0..trials).map(|_| s.draw_origin().1).sum();
    let mean = total as f64 / trials as f64;
    assert!((16.0..=24.0).contains(&mean), "mean draws {mean}");
}

#[test]
fn rich_patches_are_accepted_at_once() {
    let labels = Tensor::from_fn(&[4, 16, 16], |i| i != [0, 0, 0]).unwrap();
    let full = Volume::new("full", Tensor::full(&[4, 16, 16], 0).unwrap(), labels, [1.0; 3]).unwrap();
    let rej = Rejection { min_cleft: 10, p_reject: 1.0 };
    let mut s = Sampler::new(full, [2, 8, 8], rej, AugmentProbs::NONE, 0).unwrap();
    assert!((0..100).all(|_| s.draw_origin().1 == 1));
}

#[test]
fn sampled_patches_are_consistent_crops_of_the_volume() {
    let v = synthesize(&SynthConfig { extent: [8, 48, 48], seed: 3, ..SynthConfig::default() }).unwrap();
    let mut s = Sampler::new(v, [4, 16, 16], Rejection::default(), AugmentProbs::default(), 9).unwrap();
    let mut seen_rotation = false;
    for _ in 0..40 {
        let p = s.sample().unwrap();
        let mut reference = s.patch_at(p.origin).unwrap();
        let rec = p.augmentation;
        seen_rotation |= rec.quarter_turns > 0;
        reference.segmentation = rotate(&reference.segmentation, rec.quarter_turns);
        reference.boundary = rotate(&reference.boundary, rec.quarter_turns);
        if let Some(a) = rec.flip_axis {
            reference.segmentation = flip(&reference.segmentation, a);
            reference.boundary = flip(&reference.boundary, a);
        }
        assert_eq!(p.segmentation, reference.segmentation);
        assert_eq!(p.boundary, reference.boundary);
        assert_eq!(p.raw.shape(), &[4, 16, 16]);
        assert!(p.raw.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(seen_rotation);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tanh_map_commutes_with_flips_and_rotations(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = random_mask(&mut r, 7, 0.5);
        prop_assume!(m.data().iter().any(|&v| !v));
        let t = tanh_distance_map(&m).unwrap();
        for axis in 0..3 {
            prop_assert_eq!(tanh_distance_map(&flip(&m, axis)).unwrap(), flip(&t, axis));
        }
        for k in 1..4u8 {
            prop_assert_eq!(tanh_distance_map(&rotate(&m, k)).unwrap(), rotate(&t, k));
        }
    }

    #[test]
    fn vol1_round_trips_bit_exactly(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = [r.random_range(1..5), r.random_range(1..6), r.random_range(1..6)];
        let n: usize = shape.iter().product();
        let spacing = [r.random::<f32>() * 50.0, 4.0, r.random::<f32>()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol1");
        let payloads = [
            Vol1Data::Raw(Tensor::from_vec(&shape, (0..n).map(|_| r.random()).collect()).unwrap()),
            Vol1Data::Mask(Tensor::from_vec(&shape, (0..n).map(|_| r.random()).collect()).unwrap()),
            Vol1Data::Field(Tensor::from_vec(&shape, (0..n).map(|_| f32::from_bits(r.random::<u32>() & 0x7f7f_ffff)).collect()).unwrap()),
        ];
        for data in payloads {
            let v = Vol1 { data, spacing };
            write_vol1(&path, &v).unwrap();
            let bytes = std::fs::read(&path).unwrap();
            let back = read_vol1(&path).unwrap();
            prop_assert_eq!(&back, &v);
            write_vol1(&path, &back).unwrap();
            prop_assert_eq!(std::fs::read(&path).unwrap(), bytes);
        }
    }
}

#[test]
fn vol1_rejects_corrupt_files_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.vol1");
    std::fs::write(&path, b"VOL2garbage").unwrap();
    let err = read_vol1(&path).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    assert!(err.to_string().contains("bad.vol1"), "{err}");
    let v = Vol1 { data: Vol1Data::Mask(Tensor::full(&[2, 2, 2], true).unwrap()), spacing: [1.0; 3] };
    write_vol1(&path, &v).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_vol1(&path).is_err());
}

#[test]
fn volumes_save_and_load() {
    let v = synthesize(&SynthConfig { extent: [4, 16, 16], ..SynthConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("vol");
    v.save(&stem).unwrap();
    let back = Volume::load(&stem).unwrap();
    assert_eq!((back.raw, back.labels, back.spacing), (v.raw, v.labels, v.spacing));
}

#[test]
fn synthetic_volumes_are_sparse_and_seeded() {
    let cfg = SynthConfig::default();
    let a = synthesize(&cfg).unwrap();
    assert!(a.cleft_fraction() > 0.0 && a.cleft_fraction() < 0.05, "{}", a.cleft_fraction());
    assert_eq!(synthesize(&cfg).unwrap().raw, a.raw);
    let b = synthesize(&SynthConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(b.raw, a.raw);
    let (train, val) = train_val_split(&a).unwrap();
    assert_eq!((train.extent()[0], val.extent()[0]), (32, 8));
}

#[cfg(feature = "hdf5")]
#[test]
fn hdf5_import_binarizes_by_sentinel() {
    use cleftnet::data::cremi::{import_cremi, CremiPaths};

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sample_x.hdf");
    let shape = [2usize, 3, 4];
    let raw: Vec<u8> = (0..24).map(|i| (i * 10) as u8).collect();
    let mut ids = vec![u64::MAX; 24];
    ids[1] = 7;
    ids[2] = 7;
    ids[13] = 42;
    {
        let f = hdf5::File::create(&path).unwrap();
        let labels = f.create_group("volumes").unwrap().create_group("labels").unwrap();
        let r = f.new_dataset::<u8>().shape(shape).create("volumes/raw").unwrap();
        r.write_raw(&raw).unwrap();
        r.new_attr::<f64>().shape([3]).create("resolution").unwrap().write_raw(&[40.0, 4.0, 4.0]).unwrap();
        labels.new_dataset::<u64>().shape(shape).create("clefts").unwrap().write_raw(&ids).unwrap();
    }
    let v = import_cremi(&path, &CremiPaths::default()).unwrap();
    assert_eq!(v.raw.data(), &raw[..]);
    let want: Vec<bool> = ids.iter().map(|&i| i != u64::MAX).collect();
    assert_eq!(v.labels.data(), &want[..]);
    assert_eq!(v.labels.data().iter().filter(|&&m| m).count(), 3);
    assert_eq!(v.spacing, [40.0, 4.0, 4.0]);

    // A custom sentinel treats id 7 as background instead.
    let paths = CremiPaths { background_sentinel: 7, ..CremiPaths::default() };
    let v = import_cremi(&path, &paths).unwrap();
    assert_eq!(v.labels.data().iter().filter(|&&m| !m).count(), 2);

    let missing = CremiPaths { raw: "volumes/nope".into(), ..CremiPaths::default() };
    let err = import_cremi(&path, &missing).err().unwrap().to_string();
    assert!(err.contains("volumes/raw") && err.contains("volumes/labels/clefts"), "{err}");
}
