mod common;

use cleftnet::attention::{fa_forward, gated_attention_cwa, gated_attention_swa, self_attention, FeatureAugmentor, Resize, SelfAttention};
use cleftnet::autodiff::{Graph, ParamStore};
use cleftnet::nn::{Init, RunningStats};
use cleftnet::tensor::{conv3d, max_pool3d, softmax_vector, trilinear_upsample, ConvGeometry};
use cleftnet::Tensor;
use common::{linear_taps, loop_attention, loop_conv3d, rng};
use proptest::prelude::*;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0)).unwrap()
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b).unwrap();
    assert!(d <= tol, "max difference {d}");
}

#[test]
fn conv_matches_loop_oracle() {
    let cases = [
        ([1, 4, 4, 4, 2], [3, 3, 3, 2, 3], [1, 1, 1], [1, 1, 1]),
        ([2, 3, 5, 4, 1], [1, 3, 3, 1, 2], [1, 1, 1], [0, 1, 1]),
        ([1, 4, 6, 6, 2], [2, 2, 2, 2, 2], [2, 2, 2], [0, 0, 0]),
        ([1, 5, 5, 5, 3], [3, 3, 3, 3, 1], [2, 1, 2], [1, 0, 1]),
    ];
    for (i, (xs, ks, stride, padding)) in cases.into_iter().enumerate() {
        let x = random(&xs, 10 + i as u64);
        let k = random(&ks, 20 + i as u64);
        let y = conv3d(&x, &k, ConvGeometry { stride, padding }).unwrap();
        assert_close(&y, &loop_conv3d(&x, &k, stride, padding), 1e-12);
    }
}

#[test]
fn conv_hand_example() {
    let x = Tensor::from_vec(&[1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let k = Tensor::from_vec(&[1, 1, 3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap();
    let y = conv3d(&x, &k, ConvGeometry { stride: [1, 1, 1], padding: [0, 0, 1] }).unwrap();
    assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
}

fn rows(t: &Tensor<f64>, item: usize) -> Vec<Vec<f64>> {
    let [_, n, c] = *t.shape() else { panic!() };
    (0..n).map(|i| t.data()[(item * n + i) * c..(item * n + i + 1) * c].to_vec()).collect()
}

#[test]
fn attention_matches_loop_oracle() {
    for (b, bq, s, t, ck, cv) in [(1, 1, 7, 3, 2, 3), (2, 1, 12, 5, 3, 2), (3, 3, 9, 9, 4, 1), (2, 2, 20, 1, 1, 5)] {
        let k = random(&[b, s, ck], 1).map(|v| 2.0 * v);
        let v = random(&[b, s, cv], 2);
        let q = random(&[bq, t, ck], 3).map(|v| 2.0 * v);
        let mut g = Graph::new();
        let (kv, vv, qv) = (g.constant(k.clone()), g.constant(v.clone()), g.constant(q.clone()));
        let z = g.attention(kv, vv, qv).unwrap();
        let z = g.value(z).clone();
        for item in 0..b {
            let want = loop_attention(&rows(&k, item), &rows(&v, item), &rows(&q, if bq == 1 { 0 } else { item }));
            for (got, w) in rows(&z, item).iter().zip(&want) {
                for (a, c) in got.iter().zip(w) {
                    assert!((a - c).abs() < 1e-12, "{a} vs {c}");
                }
            }
        }
    }
}

#[test]
fn attention_is_invariant_to_key_order() {
    let (s, t) = (15, 4);
    let k = random(&[1, s, 3], 4);
    let v = random(&[1, s, 2], 5);
    let q = random(&[1, t, 3], 6);
    let perm: Vec<usize> = (0..s).map(|i| (i * 7 + 3) % s).collect();
    let permute = |x: &Tensor<f64>, c: usize| {
        Tensor::from_vec(&[1, s, c], perm.iter().flat_map(|&i| x.data()[i * c..(i + 1) * c].to_vec()).collect()).unwrap()
    };
    let run = |k: Tensor<f64>, v: Tensor<f64>| {
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(k), g.constant(v), g.constant(q.clone()));
        let z = g.attention(a, b, c).unwrap();
        g.value(z).clone()
    };
    assert_close(&run(k.clone(), v.clone()), &run(permute(&k, 3), permute(&v, 2)), 1e-14);
}

fn init_blocks(seed: u64) -> (ParamStore<f64>, rand_chacha::ChaCha8Rng) {
    (ParamStore::new(), rng(seed))
}

#[test]
fn feature_augmentor_output_extent_follows_the_query() {
    let x = random(&[2, 2, 4, 8, 6], 7);
    for (resize, want) in [(Resize::HALF, [1, 2, 4]), (Resize::DOUBLE, [4, 8, 16]), (Resize::Same, [2, 4, 8])] {
        let (mut params, mut r) = init_blocks(1);
        let mut running = RunningStats::default();
        let mut init = Init { params: &mut params, running: &mut running, rng: &mut r };
        let fa = FeatureAugmentor::new(&mut init, "fa", 6, [2, 4, 8], resize, 3, 3).unwrap();
        let y = fa_forward(&x, &fa, &params).unwrap();
        assert_eq!(y.shape(), &[2, want[0], want[1], want[2], 6]);
        assert_eq!(fa.query_extent, want);
    }
    // Anisotropic factors resize each axis independently.
    let (mut params, mut r) = init_blocks(2);
    let mut running = RunningStats::default();
    let mut init = Init { params: &mut params, running: &mut running, rng: &mut r };
    let fa = FeatureAugmentor::new(&mut init, "fa", 6, [2, 4, 8], Resize::Down([1, 2, 2]), 2, 2).unwrap();
    assert_eq!(fa_forward(&x, &fa, &params).unwrap().shape(), &[2, 2, 2, 4, 6]);
}

#[test]
fn single_voxel_augmentor_broadcasts_the_value() {
    // One key: the softmax weight is 1, so every query sees conv_V(m).
    let (mut params, mut r) = init_blocks(3);
    let mut running = RunningStats::default();
    let mut init = Init { params: &mut params, running: &mut running, rng: &mut r };
    let fa = FeatureAugmentor::new(&mut init, "fa", 3, [1, 1, 1], Resize::DOUBLE, 2, 2).unwrap();
    let m = Tensor::from_vec(&[1, 1, 1, 3], vec![0.3, -0.7, 1.1]).unwrap();
    let y = fa_forward(&m, &fa, &params).unwrap();
    let wv = &params.get(fa.value.weight).value;
    let wo = &params.get(fa.output.weight).value;
    let bo = &params.get(fa.output.bias.unwrap()).value;
    let v: Vec<f64> = (0..2).map(|j| (0..3).map(|i| m.data()[i] * wv.data()[i * 2 + j]).sum()).collect();
    let n: Vec<f64> = (0..3).map(|o| bo.data()[o] + (0..2).map(|j| v[j] * wo.data()[j * 3 + o]).sum::<f64>()).collect();
    assert_eq!(y.shape(), &[2, 2, 2, 3]);
    for vox in y.data().chunks(3) {
        for o in 0..3 {
            // Trilinear upsampling of a single voxel is constant.
            assert!((vox[o] - (n[o] + m.data()[o])).abs() < 1e-12);
        }
    }
}

#[test]
fn augmentor_equals_self_attention_with_matched_queries() {
    let (c, ck) = (4, 3);
    let (mut params, mut r) = init_blocks(4);
    let mut running = RunningStats::default();
    let mut init = Init { params: &mut params, running: &mut running, rng: &mut r };
    let sa = SelfAttention::new(&mut init, "sa", c, Resize::Same, ck, ck).unwrap();
    let fa = FeatureAugmentor::new(&mut init, "fa", c, [2, 3, 4], Resize::Same, ck, ck).unwrap();
    let x = random(&[2, 3, 4, c], 8);
    for (from, to) in [(sa.key.weight, fa.key.weight), (sa.value.weight, fa.value.weight), (sa.output.weight, fa.output.weight)] {
        params.get_mut(to).value = params.get(from).value.clone();
    }
    params.get_mut(fa.output.bias.unwrap()).value = params.get(sa.output.bias.unwrap()).value.clone();
    let wq = params.get(sa.query.weight).value.clone();
    let bq = params.get(sa.query.bias.unwrap()).value.clone();
    let q = conv3d(&x, &wq, ConvGeometry::UNIT).unwrap();
    let q = Tensor::from_fn(q.shape(), |i| q.get(i) + bq.data()[i[3]]).unwrap();
    params.get_mut(fa.query).value = q;
    assert_close(&self_attention(&x, &sa, &params).unwrap(), &fa_forward(&x, &fa, &params).unwrap(), 1e-12);
}

#[test]
fn spatial_gate_hand_example() {
    // Scores (1, 2, 3, 4) · q=1 → softmax weights.
    let x = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let q = Tensor::from_vec(&[1], vec![1.0]).unwrap();
    let y = gated_attention_swa(&x, &q).unwrap();
    let z: f64 = (1..=4).map(|i| (i as f64).exp()).sum();
    for (i, &v) in y.data().iter().enumerate() {
        let m = (i + 1) as f64;
        assert!((v - m * m.exp() / z).abs() < 1e-12);
    }
    let same = Tensor::full(&[1, 2, 2, 3], 0.5f64).unwrap();
    let y = gated_attention_swa(&same, &Tensor::from_vec(&[3], vec![0.2, -1.0, 3.0]).unwrap()).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
}

#[test]
fn channel_gate_hand_example() {
    // Two voxels, two channels: channel scores are M q.
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 2.0, 1.0]).unwrap();
    let q = Tensor::from_vec(&[2], vec![0.5, 1.0]).unwrap();
    let y = gated_attention_cwa(&x, &q).unwrap();
    let (s0, s1) = (0.5 * 1.0 + 1.0 * 2.0, 0.5 * 0.0 + 1.0 * 1.0);
    let w0 = 1.0 / (1.0 + f64::exp(s1 - s0));
    let want: [f64; 4] = [w0, 0.0, 2.0 * w0, 1.0 - w0];
    for (a, b) in y.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    let one = Tensor::from_vec(&[1, 1, 3, 1], vec![0.2, 0.4, 0.9]).unwrap();
    assert_eq!(gated_attention_cwa(&one, &Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap(), one);
}

#[test]
fn max_pool_matches_block_maximum() {
    let x = random(&[2, 4, 6, 2, 3], 9);
    let (y, _) = max_pool3d(&x, [2, 2, 2]).unwrap();
    let want = Tensor::from_fn(&[2, 2, 3, 1, 3], |i| {
        let mut m = f64::NEG_INFINITY;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    m = m.max(x.get(&[i[0], 2 * i[1] + a, 2 * i[2] + b, 2 * i[3] + c, i[4]]));
                }
            }
        }
        m
    })
    .unwrap();
    assert_eq!(y, want);
}

#[test]
fn trilinear_upsampling_matches_scalar_oracle() {
    let x = random(&[1, 3, 4, 5, 2], 10);
    for f in [[2, 2, 2], [1, 2, 2], [3, 1, 2]] {
        let y = trilinear_upsample(&x, f).unwrap();
        let want = Tensor::from_fn(&[1, 3 * f[0], 4 * f[1], 5 * f[2], 2], |i| {
            let taps: Vec<_> = (0..3).map(|a| linear_taps(i[a + 1], [3, 4, 5][a], f[a])).collect();
            let mut acc = 0.0;
            for (zi, zw) in [(taps[0].0, 1.0 - taps[0].2), (taps[0].1, taps[0].2)] {
                for (yi, yw) in [(taps[1].0, 1.0 - taps[1].2), (taps[1].1, taps[1].2)] {
                    for (xi, xw) in [(taps[2].0, 1.0 - taps[2].2), (taps[2].1, taps[2].2)] {
                        acc += zw * yw * xw * x.get(&[0, zi, yi, xi, i[4]]);
                    }
                }
            }
            acc
        })
        .unwrap();
        assert_close(&y, &want, 1e-12);
    }
    let edge = Tensor::from_vec(&[1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
    let y = trilinear_upsample(&edge, [1, 1, 2]).unwrap();
    assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn upsampling_preserves_the_mean_of_smooth_volumes() {
    let x = Tensor::from_fn(&[1, 8, 8, 8, 1], |i| ((i[1] + 2 * i[2] + 3 * i[3]) as f64 * 0.1).sin()).unwrap();
    let y = trilinear_upsample(&x, [2, 2, 2]).unwrap();
    let mean = |t: &Tensor<f64>| t.sum() / t.len() as f64;
    assert!((mean(&x) - mean(&y)).abs() < 1e-2);
}

#[test]
fn softmax_is_shift_safe() {
    let v = softmax_vector(&Tensor::from_vec(&[2], vec![1000.0, 1001.0]).unwrap()).unwrap();
    let e = std::f64::consts::E;
    assert!((v.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
    let v = softmax_vector(&Tensor::from_vec(&[3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap()).unwrap();
    for (a, b) in v.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 0.5]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_and_sequential_graphs_agree_bitwise() {
    use cleftnet::model::{Model, Variant};
    use cleftnet::nn::Mode;
    use cleftnet::par::Exec;
    for v in [Variant::Cleftnet, Variant::Selfattn, Variant::Gated] {
        let model = Model::<f32>::new(common::tiny_model_config().with_variant(v), 5).unwrap();
        let x = random(&[2, 2, 16, 16, 1], 11).cast::<f32>();
        let run = |exec| {
            let mut g = Graph::with_exec(exec);
            let xv = g.constant(x.clone());
            let (out, _) = model.forward(&mut g, xv, Mode::Train).unwrap();
            let w = g.value(out.segmentation).map(|_| 1.0f32);
            let l = g.weighted_sum(out.segmentation, w).unwrap();
            let grads = g.backward(l).unwrap();
            let mut store = model.params.clone();
            store.zero_grad();
            g.accumulate_param_grads(&grads, &mut store);
            (g.value(l).clone(), store.iter().map(|p| p.grad.clone()).collect::<Vec<_>>())
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel), "{v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// A loss linear in `x` equals `⟨x, ∂L/∂x⟩`; the same holds for the kernel.
    #[test]
    fn conv_gradients_satisfy_euler_identity(seed in any::<u64>(), k in 1usize..=3) {
        let x = random(&[1, 3, 4, 4, 2], seed);
        let w = random(&[k, k, k, 2, 3], seed ^ 1);
        let mut g = Graph::new();
        let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
        let y = g.conv3d(xv, wv, ConvGeometry::same(k)).unwrap();
        let r = random(g.shape(y), seed ^ 2);
        let l = g.weighted_sum(y, r).unwrap();
        let grads = g.backward(l).unwrap();
        let loss = g.value(l).data()[0];
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        prop_assert!((dot(&x, grads.get(xv).unwrap()) - loss).abs() < 1e-10);
        prop_assert!((dot(&w, grads.get(wv).unwrap()) - loss).abs() < 1e-10);
    }

    /// Keys and queries cannot matter when every value row is the same.
    #[test]
    fn attention_with_constant_values_has_no_score_gradient(seed in any::<u64>()) {
        let k = random(&[2, 6, 3], seed);
        let q = random(&[1, 4, 3], seed ^ 3);
        let row = random(&[2], seed ^ 4);
        let v = Tensor::from_fn(&[2, 6, 2], |i| row.data()[i[2]]).unwrap();
        let mut g = Graph::new();
        let (kv, vv, qv) = (g.leaf(k), g.leaf(v), g.leaf(q));
        let z = g.attention(kv, vv, qv).unwrap();
        let r = random(g.shape(z), seed ^ 5);
        let l = g.weighted_sum(z, r).unwrap();
        let grads = g.backward(l).unwrap();
        for var in [kv, qv] {
            prop_assert!(grads.get(var).unwrap().data().iter().all(|d| d.abs() < 1e-12));
        }
    }

    /// Scaling the loss scales every gradient by the same factor.
    #[test]
    fn gradients_are_linear_in_the_loss(seed in any::<u64>(), c in -3.0f64..3.0) {
        let k = random(&[1, 5, 2], seed);
        let v = random(&[1, 5, 2], seed ^ 6);
        let q = random(&[1, 3, 2], seed ^ 7);
        let grad_q = |scale: f64| {
            let mut g = Graph::new();
            let (kv, vv, qv) = (g.constant(k.clone()), g.constant(v.clone()), g.leaf(q.clone()));
            let z = g.attention(kv, vv, qv).unwrap();
            let s = g.sum(z);
            let l = g.scale(s, scale);
            g.backward(l).unwrap().get(qv).unwrap().clone()
        };
        let (one, scaled) = (grad_q(1.0), grad_q(c));
        for (a, b) in one.data().iter().zip(scaled.data()) {
            prop_assert!((a * c - b).abs() < 1e-12);
        }
    }
}
