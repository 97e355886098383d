//! Property tests for the spec's module invariants.

use proptest::prelude::*;
use tapfm_core::aggregator::{
    bag_forward, infer_bag, normalize_attention, AggregatorParams, ClassWeights,
};
use tapfm_core::autograd::Graph;
use tapfm_core::metrics::{roc_auc, roc_auc_pair_count};
use tapfm_core::tensor::Tensor;

fn finite_f64(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL.prop_map(move |v| lo + (v.abs() % (hi - lo)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // normalize_attention always yields a distribution, degenerate cases
    // included
    #[test]
    fn normalized_attention_sums_to_one(
        values in prop::collection::vec(finite_f64(-5.0, 5.0), 1..50)
    ) {
        let a = Tensor::<f64>::from_vec(values);
        let norm = normalize_attention(&a).unwrap();
        let sum: f64 = norm.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(norm.data().iter().all(|&v| v > 0.0));
    }

    // permutation invariance of the full normalize→aggregate→classify path
    #[test]
    fn bag_prediction_permutation_invariant(
        k in 2usize..20,
        d in 1usize..12,
        seed in 0u64..1000,
        perm_seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::<f64>::new(
            vec![k, d],
            (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        ).unwrap();
        let a = Tensor::<f64>::from_vec(
            (0..k).map(|_| rng.random_range(-3.0..3.0)).collect(),
        );
        let params = AggregatorParams {
            w: Tensor::new(vec![1, d], (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            b: Tensor::from_vec(vec![rng.random_range(-0.5..0.5)]),
        };
        let mut perm: Vec<usize> = (0..k).collect();
        let mut prng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
        perm.shuffle(&mut prng);
        let mut zp = Tensor::zeros(vec![k, d]);
        let mut ap = Tensor::zeros(vec![k]);
        for (dst, &src) in perm.iter().enumerate() {
            zp.data_mut()[dst * d..(dst + 1) * d]
                .copy_from_slice(&z.data()[src * d..(src + 1) * d]);
            ap.data_mut()[dst] = a.data()[src];
        }
        let y1 = infer_bag(&z, &a, &params).unwrap();
        let y2 = infer_bag(&zp, &ap, &params).unwrap();
        prop_assert!((y1.data()[0] - y2.data()[0]).abs() <= 1e-12);
    }

    // aggregator loss is non-negative for any weighting
    #[test]
    fn aggregator_loss_nonnegative(
        p in 0.0001f64..0.9999,
        y in 0u8..2,
        w in 0.1f64..30.0,
    ) {
        let mut g = Graph::<f64>::new();
        let probs = g.leaf(Tensor::from_vec(vec![p]), false);
        let weights = ClassWeights {
            pos: vec![w],
            neg: vec![1.0 / w],
            alpha: vec![1.0],
        };
        let (loss, _) = tapfm_core::aggregator::weighted_bce_value(
            &mut g, &probs, &[y as f64], &weights,
        ).unwrap();
        prop_assert!(loss.data().item() >= 0.0);
    }

    // detachment: gradients of the aggregator loss never reach the detached
    // feature source, while W and b always receive one
    #[test]
    fn detach_blocks_upstream_gradients(
        k in 1usize..10,
        d in 1usize..8,
        seed in 0u64..500,
    ) {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        // simulated backbone chain on the same graph
        let theta = g.leaf(
            Tensor::new(vec![d, d], (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            true,
        );
        let x = g.leaf(
            Tensor::new(vec![k, d], (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            false,
        );
        let z = g.matmul(&x, &theta).unwrap();
        let a_raw = g.mean_axis(&z, 1).unwrap();
        // detach severs the aggregator from theta
        let z_det = z.detach();
        let a_det = a_raw.detach();
        let zl = g.leaf(z_det.data().clone(), true);
        let al = g.leaf(a_det.data().clone(), true);
        let w = g.leaf(
            Tensor::new(vec![1, d], (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            true,
        );
        let b = g.leaf(Tensor::from_vec(vec![0.0]), true);
        let fwd = bag_forward(&mut g, &zl, &al, &w, &b, &[1.0], &ClassWeights::unit(1)).unwrap();
        g.backward(&fwd.loss, None).unwrap();
        prop_assert!(g.grad(&theta).is_none(), "gradient leaked through detach");
        prop_assert!(g.grad(&w).is_some());
        prop_assert!(g.grad(&b).is_some());
    }

    // fast AUC equals brute-force pair counting on tied, coarse scores
    #[test]
    fn auc_equals_pair_enumeration(
        scores in prop::collection::vec(0u8..8, 4..120),
        flips in prop::collection::vec(any::<bool>(), 4..120),
    ) {
        let m = scores.len().min(flips.len());
        let s: Vec<f64> = scores[..m].iter().map(|&v| v as f64 / 7.0).collect();
        let mut l: Vec<u8> = flips[..m].iter().map(|&b| b as u8).collect();
        l[0] = 1;
        l[m - 1] = 0;
        let fast = roc_auc(&s, &l).unwrap();
        let slow = roc_auc_pair_count(&s, &l).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-12);
    }

    // detach is idempotent
    #[test]
    fn detach_idempotent(vals in prop::collection::vec(finite_f64(-3.0, 3.0), 1..20)) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vals), true);
        let d1 = x.detach();
        let d2 = d1.detach();
        prop_assert_eq!(d1.data().data(), d2.data().data());
        prop_assert!(d1.is_detached() && d2.is_detached());
        prop_assert!(!d1.requires_grad() && !d2.requires_grad());
    }
}
