use pmgan_core::fusion::{conv_fuse, deinterleave, interleave, sum_fuse, ClipStack, FeatureMap};
use pmgan_core::model::{self, GeneratorParams, ModelConfig, NoiseSpec};
use pmgan_core::synth::{decode_dataset, encode_dataset};
use pmgan_core::tensor::{softmax, Tensor};
use pmgan_core::{moment_distance, synthesize, SynthConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn map_strategy(h: usize, w: usize, d: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-10.0f64..10.0, h * w * d).prop_map(move |v| FeatureMap::from_vec(h, w, d, v).unwrap())
}

fn stack_strategy() -> impl Strategy<Value = Vec<FeatureMap>> {
    (1usize..4, 1usize..4, 1usize..5, 1usize..7)
        .prop_flat_map(|(h, w, d, t)| prop::collection::vec(map_strategy(h, w, d), t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn sum_fuse_is_permutation_invariant(clips in stack_strategy(), rot in 0usize..7) {
        let fused = sum_fuse(&ClipStack::new(clips.clone()).unwrap());
        let mut permuted = clips.clone();
        permuted.reverse();
        let n = permuted.len();
        permuted.rotate_left(rot % n);
        let other = sum_fuse(&ClipStack::new(permuted).unwrap());
        for (a, b) in fused.data().iter().zip(other.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sum_fuse_is_linear(
        pair in stack_strategy().prop_flat_map(|a| {
            let [h, w, d] = a[0].dims();
            let t = a.len();
            (Just(a), prop::collection::vec(map_strategy(h, w, d), t))
        }),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let (a, b) = pair;
        let [h, w, d] = a[0].dims();
        let combo: Vec<FeatureMap> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                let v = x.data().iter().zip(y.data()).map(|(p, q)| alpha * p + beta * q).collect();
                FeatureMap::from_vec(h, w, d, v).unwrap()
            })
            .collect();
        let lhs = sum_fuse(&ClipStack::new(combo).unwrap());
        let fa = sum_fuse(&ClipStack::new(a).unwrap());
        let fb = sum_fuse(&ClipStack::new(b).unwrap());
        for ((l, x), y) in lhs.data().iter().zip(fa.data()).zip(fb.data()) {
            prop_assert!((l - (alpha * x + beta * y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn interleave_round_trips_exactly(
        maps in (1usize..4, 1usize..4, 1usize..9)
            .prop_flat_map(|(h, w, d)| (map_strategy(h, w, d), map_strategy(h, w, d)))
    ) {
        let (inf, gen) = maps;
        let stacked = interleave(&inf, &gen).unwrap();
        let (inf2, gen2) = deinterleave(&stacked).unwrap();
        prop_assert_eq!(inf2, inf);
        prop_assert_eq!(gen2, gen);
    }

    #[test]
    fn selector_filter_recovers_infrared(
        maps in (1usize..4, 1usize..4, 1usize..9)
            .prop_flat_map(|(h, w, d)| (map_strategy(h, w, d), map_strategy(h, w, d)))
    ) {
        let (inf, gen) = maps;
        let d = inf.channels();
        let mut sel = Tensor::zeros([1, 1, 2 * d, d]);
        for c in 0..d {
            sel.data_mut()[(2 * c + 1) * d + c] = 1.0;
        }
        prop_assert_eq!(conv_fuse(&inf, &gen, &sel, &Tensor::zeros([d])).unwrap(), inf);
    }

    #[test]
    fn softmax_sums_to_one_at_large_magnitude(logits in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let p = softmax(&Tensor::new([logits.len()], logits.clone()).unwrap());
        let total: f64 = p.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        // Independent oracle: p_i = 1 / sum_j exp(x_j - x_i).
        for (i, &pi) in p.data().iter().enumerate() {
            let denom: f64 = logits.iter().map(|&x| (x - logits[i]).exp()).sum();
            prop_assert!((pi - 1.0 / denom).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-50.0f64..50.0, 2..20), shift in -1e3f64..1e3) {
        let a = softmax(&Tensor::new([logits.len()], logits.clone()).unwrap());
        let moved: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let b = softmax(&Tensor::new([moved.len()], moved).unwrap());
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn generator_preserves_shape(k in prop::sample::select(vec![1usize, 3, 5]), d in 1usize..17, h in 1usize..4, w in 1usize..4, noisy in any::<bool>(), seed in any::<u64>()) {
        let noise = if noisy { NoiseSpec { enabled: true, channels: 2, sigma: 0.5 } } else { NoiseSpec::disabled() };
        let mc = ModelConfig { kernel: k, noise, ..ModelConfig::new(h, w, d, 2) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = GeneratorParams::init(&mc, &mut rng);
        let f = FeatureMap::new(Tensor::from_fn([h, w, d], |i| (i as f64 * 0.37).sin())).unwrap();
        let out = model::generate(&f, &mc, &gen, &mut rng).unwrap();
        prop_assert_eq!(out.dims(), [h, w, d]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn dataset_file_round_trip(
        classes in 2usize..5,
        per_class in 2usize..6,
        clips in 1usize..4,
        h in 1usize..3,
        w in 1usize..3,
        d in 1usize..4,
        latent in 3usize..7,
        noise in 0.0f64..0.5,
        shift in 0.0f64..2.0,
        retain in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let config = SynthConfig {
            classes,
            samples_per_class: per_class,
            clips,
            height: h,
            width: w,
            channels: d,
            latent_dim: latent,
            infrared_rank: latent - 1,
            noise_sigma: noise,
            seed,
            retain_latents: retain,
            ..SynthConfig::default()
        };
        let split = pmgan_core::synthesize_shifted(&config, shift).unwrap();
        let bytes = encode_dataset(&split);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &split);
        prop_assert_eq!(encode_dataset(&back), bytes);
    }
}

fn brute_moments(maps: &[FeatureMap]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = maps[0].data().len();
    let m = maps.len() as f64;
    let mean: Vec<f64> = (0..n).map(|i| maps.iter().map(|f| f.data()[i]).sum::<f64>() / m).collect();
    let cov = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| maps.iter().map(|f| (f.data()[i] - mean[i]) * (f.data()[j] - mean[j])).sum::<f64>() / m)
                .collect()
        })
        .collect();
    (mean, cov)
}

#[test]
fn moment_distance_matches_brute_force_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    use rand::Rng;
    for trial in 0..20 {
        let (h, w, d) = (1 + trial % 2, 2, 1 + trial % 3);
        let make = |rng: &mut ChaCha8Rng, n: usize, offset: f64| -> Vec<FeatureMap> {
            (0..n)
                .map(|_| {
                    FeatureMap::from_vec(h, w, d, (0..h * w * d).map(|_| offset + rng.gen_range(-1.0..1.0)).collect())
                        .unwrap()
                })
                .collect()
        };
        let real = make(&mut rng, 7, 0.5);
        let fake = make(&mut rng, 11, -0.2);
        let (mr, cr) = brute_moments(&real);
        let (mf, cf) = brute_moments(&fake);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dm: Vec<f64> = mr.iter().zip(&mf).map(|(a, b)| a - b).collect();
        let cr_flat: Vec<f64> = cr.concat();
        let dc: Vec<f64> = cr_flat.iter().zip(cf.concat()).map(|(a, b)| a - b).collect();
        let expected = norm(&dm) / norm(&mr) + norm(&dc) / norm(&cr_flat);
        let got = moment_distance(&real, &fake).unwrap();
        assert!((got - expected).abs() <= 1e-10, "trial {trial}: {got} vs {expected}");
    }
}

#[test]
fn constant_offset_moves_only_the_mean_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    use rand::Rng;
    let real: Vec<FeatureMap> = (0..9)
        .map(|_| FeatureMap::from_vec(2, 1, 2, (0..4).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap())
        .collect();
    let c = [0.3, -0.1, 0.2, 0.4];
    let fake: Vec<FeatureMap> = real
        .iter()
        .map(|f| FeatureMap::from_vec(2, 1, 2, f.data().iter().zip(c).map(|(x, o)| x + o).collect()).unwrap())
        .collect();
    let (mr, _) = brute_moments(&real);
    let c_norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mr_norm = mr.iter().map(|x| x * x).sum::<f64>().sqrt();
    let got = moment_distance(&real, &fake).unwrap();
    assert!((got - c_norm / mr_norm).abs() <= 1e-12);
}

/// Least-squares one-vs-rest classifier with a bias column, fitted by the
/// normal equations with a tiny ridge.
fn least_squares_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize) -> f64 {
    let n = train[0].0.len() + 1;
    let row = |x: &[f64]| -> Vec<f64> {
        let mut r = x.to_vec();
        r.push(1.0);
        r
    };
    let mut a = vec![vec![0.0; n + classes]; n];
    for (x, c) in train {
        let r = row(x);
        for i in 0..n {
            for j in 0..n {
                a[i][j] += r[i] * r[j];
            }
            a[i][n + c] += r[i];
        }
    }
    for (i, ai) in a.iter_mut().enumerate() {
        ai[i] += 1e-6;
    }
    // Gauss-Jordan with partial pivoting on the augmented system.
    for col in 0..n {
        let pivot = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    let pivot_row = a[col].clone();
                    for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
    }
    let correct = test
        .iter()
        .filter(|(x, c)| {
            let r = row(x);
            let scores: Vec<f64> = (0..classes).map(|k| (0..n).map(|i| r[i] * a[i][n + k]).sum()).collect();
            pmgan_core::eval::argmax(&scores) == *c
        })
        .count();
    correct as f64 / test.len() as f64
}

fn fused_features(samples: &[pmgan_core::PairedSample], visible: bool) -> Vec<(Vec<f64>, usize)> {
    samples
        .iter()
        .map(|s| {
            let stack = if visible { &s.visible } else { &s.infrared };
            (sum_fuse(stack).data().to_vec(), s.class)
        })
        .collect()
}

#[test]
fn visible_features_are_more_linearly_separable_than_infrared() {
    for seed in 0..3 {
        let split = synthesize(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let c = split.classes();
        let vis = fused_features(&split.train, true);
        let inf = fused_features(&split.train, false);
        let vis_acc = least_squares_accuracy(&vis, &vis, c);
        let inf_acc = least_squares_accuracy(&inf, &inf, c);
        assert!(vis_acc > inf_acc, "seed {seed}: visible {vis_acc} vs infrared {inf_acc}");
    }
}

#[test]
fn shift_does_not_help_a_fixed_classifier() {
    let mut infrared = [0.0; 3];
    let mut visible = [0.0; 3];
    for seed in 0..5 {
        let config = SynthConfig { seed, ..SynthConfig::default() };
        for (k, shift) in [0.0, 0.5, 1.0].into_iter().enumerate() {
            let split = pmgan_core::synthesize_shifted(&config, shift).unwrap();
            let c = split.classes();
            infrared[k] +=
                least_squares_accuracy(&fused_features(&split.train, false), &fused_features(&split.test, false), c)
                    / 5.0;
            visible[k] +=
                least_squares_accuracy(&fused_features(&split.train, true), &fused_features(&split.test, true), c)
                    / 5.0;
        }
    }
    assert!(infrared[0] >= infrared[1] && infrared[1] >= infrared[2], "infrared {infrared:?}");
    // A half-unit shift is second order for the visible classifier; only
    // the unit shift is a clear loss there.
    assert!(visible[0] > visible[2] && visible[1] > visible[2], "visible {visible:?}");
}
