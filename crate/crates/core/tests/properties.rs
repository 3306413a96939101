use proptest::prelude::*;

use fat_core::badgen::{generate_bad_samples, l_fake, l_true, BadGenHyper};
use fat_core::data::{make_clusters, ssl_split, ClusterSpec, Layout, Normalization};
use fat_core::matrix::DenseMatrix;
use fat_core::nn::{checkpoint, he_init_with, softmax, Activation};
use fat_core::vat::{adversarial_directions, kl_divergence, VatHyper};

fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(a in vec_in(5, -6.0, 6.0), b in vec_in(5, -6.0, 6.0)) {
        let (p, q) = (softmax(&a), softmax(&b));
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-15);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-15);
    }

    #[test]
    fn l_fake_increases_in_every_logit(g in vec_in(6, -10.0, 10.0), k in 0usize..6, dv in 1e-3f64..3.0) {
        let mut h = g.clone();
        h[k] += dv;
        prop_assert!(l_fake(&h).0 > l_fake(&g).0);
    }

    #[test]
    fn l_true_is_bounded_by_the_real_class_entropy_cap(g in vec_in(10, -20.0, 20.0)) {
        let (v, grad) = l_true(&g);
        prop_assert!(v >= 0.0 && v <= 10f64.ln() + 1e-12);
        prop_assert!(grad.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn directions_have_unit_norm(seed in any::<u64>(), x in vec_in(3, -2.0, 2.0)) {
        let model = he_init_with::<f64>(&[3, 8, 4], Activation::LeakyRelu(0.1), false, seed).unwrap();
        let xs = DenseMatrix::row_vector(&x);
        let hyper = VatHyper { epsilon: 0.5, xi: 1e-6, power_iters: 1 };
        let dirs = adversarial_directions(&model, &xs, &hyper, &[seed]).unwrap();
        if let Some(a) = &dirs.directions[0] {
            let n: f64 = a.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
            prop_assert!(a.kl_value >= 0.0);
        }
    }

    #[test]
    fn bad_samples_sit_at_radius_c_and_respect_alpha(seed in any::<u64>(), c in 0.1f64..3.0) {
        let model = he_init_with::<f64>(&[2, 6, 3], Activation::Relu, false, seed).unwrap();
        let xs = DenseMatrix::from_fn(8, 2, |i, j| (i as f64 - 4.0) * 0.3 + j as f64);
        let hyper = VatHyper { epsilon: 0.3, xi: 1e-6, power_iters: 1 };
        let seeds: Vec<u64> = (0..8).map(|i| seed ^ i).collect();
        let keep_all = generate_bad_samples(&model, &xs, &hyper, &BadGenHyper { capital_c: c, alpha: 1.0 }, &seeds).unwrap();
        prop_assert!(keep_all.iter().all(|s| !s.kept));
        let bad = generate_bad_samples(&model, &xs, &hyper, &BadGenHyper { capital_c: c, alpha: 0.5 }, &seeds).unwrap();
        for s in &bad {
            let d: f64 = s.point.iter().zip(&s.origin).map(|(p, o)| (p - o) * (p - o)).sum::<f64>().sqrt();
            prop_assert!(s.excluded.is_some() || (d - c).abs() < 1e-9);
            prop_assert_eq!(s.kept, s.excluded.is_none());
            prop_assert!(!s.kept || s.confidence <= 0.5);
        }
    }

    #[test]
    fn checkpoints_roundtrip_exactly(seed in any::<u64>(), bn in any::<bool>()) {
        let model = he_init_with::<f64>(&[4, 7, 5, 3], Activation::LeakyRelu(0.01), bn, seed).unwrap();
        let back = checkpoint::decode::<f64>(&checkpoint::encode(&model)).unwrap();
        prop_assert_eq!(back.params_flat(), model.params_flat());
        let x = DenseMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1);
        prop_assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
    }

    #[test]
    fn normalization_inverts(shift in -100.0f64..100.0, scale in 0.1f64..300.0, raw in vec_in(6, -500.0, 500.0)) {
        let n = Normalization::uniform(6, shift, scale);
        let back = n.invert(&n.apply::<f64>(&raw));
        for (a, b) in back.iter().zip(&raw) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn splits_are_balanced_partitions(seed in any::<u64>(), per in 1usize..5, val in 0usize..20) {
        let x = DenseMatrix::from_fn(120, 2, |i, j| (i * 2 + j) as f64);
        let y: Vec<usize> = (0..120).map(|i| i % 4).collect();
        let d = ssl_split(&x, &y, 4 * per, val, seed).unwrap();
        prop_assert!(d.record.is_partition());
        for c in 0..4 {
            prop_assert_eq!(d.labeled.y.iter().filter(|&&v| v == c).count(), per);
        }
        prop_assert_eq!(d.unlabeled.rows(), 120 - 4 * per - val);
    }

    #[test]
    fn synthetic_sets_are_deterministic(seed in any::<u64>(), layout in prop_oneof![Just(Layout::TwoMoons), Just(Layout::GaussianRing), Just(Layout::GaussianBlobs)]) {
        let spec = ClusterSpec { layout, classes: 2, n_unlabeled: 50, labeled_per_class: 3, spread: 0.2, n_validation: 10, n_test: 10, seed };
        let a = make_clusters::<f64>(&spec).unwrap();
        let b = make_clusters::<f64>(&spec).unwrap();
        prop_assert_eq!(a, b);
    }
}
