use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semicap_core::autodiff::tensor::matmul;
use semicap_core::autodiff::Tensor;
use semicap_core::dist::{jsd, kl_divergence, mixture_half, optimal_discriminator, utility_u, value_v, DiscreteJoint, LN_4};
use semicap_core::metrics::bleu;
use semicap_core::pseudo::{assign_caption, pool_size, subsample_pool, PairScorer, SearchPool};
use semicap_core::toyworld::{caption_of, generate_scene, paired_count, parse_caption};
use semicap_core::trainer::ExperimentConfig;
use semicap_core::Result;

fn joint(n: usize) -> impl Strategy<Value = DiscreteJoint> {
    prop::collection::vec(0.0f64..1.0, n * n).prop_filter_map("all-zero table", move |w| {
        if w.iter().sum::<f64>() > 1e-6 {
            DiscreteJoint::from_weights(n, n, w).ok()
        } else {
            None
        }
    })
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    })
}

struct Table(Vec<f64>);

impl PairScorer for Table {
    fn score(&self, _image: usize, caption: usize) -> Result<f64> {
        Ok(self.0[caption])
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn jsd_is_symmetric_and_bounded(p in distribution(6), q in distribution(6)) {
        let a = jsd(&p, &q).unwrap();
        let b = jsd(&q, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1e-15..=std::f64::consts::LN_2 + 1e-12).contains(&a));
        prop_assert!(kl_divergence(&p, &q).unwrap().to_f64() >= -1e-15);
    }

    #[test]
    fn value_identity_on_arbitrary_joints(p in joint(4), a in joint(4), b in joint(4)) {
        let half = mixture_half(&a, &b).unwrap();
        let v = value_v(&p, &a, &b).unwrap();
        prop_assert!((v - (2.0 * jsd(p.table(), half.table()).unwrap() - LN_4)).abs() < 1e-9);
        prop_assert!(v >= -LN_4 - 1e-12);
        let d = optimal_discriminator(&p, &half).unwrap();
        prop_assert!(d.values().iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!((utility_u(&p, &a, &b, &d).unwrap().to_f64() - v).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_bounded_and_reference_order_free(
        hyp in prop::collection::vec(0usize..6, 0..10),
        r1 in prop::collection::vec(0usize..6, 1..10),
        r2 in prop::collection::vec(0usize..6, 1..10),
    ) {
        let a = bleu(&hyp, &[&r1, &r2], 4).unwrap();
        let b = bleu(&hyp, &[&r2, &r1], 4).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.bleu.iter().chain(&a.precisions).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((0.0..=1.0).contains(&a.brevity_penalty));
        prop_assert_eq!(hyp.is_empty(), a.brevity_penalty == 0.0);
    }

    #[test]
    fn bleu_of_reference_is_one(r in prop::collection::vec(0usize..6, 4..12)) {
        let b = bleu(&r, &[&r], 4).unwrap();
        prop_assert!(b.bleu.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn pool_is_sorted_distinct_and_sized(n in 1usize..5000, frac in 0.0001f64..1.0, seed in any::<u64>()) {
        let pool = subsample_pool(n, frac, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(pool.len(), pool_size(n, frac));
        prop_assert!((1..=n).contains(&pool.len()));
        prop_assert!(pool.ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(pool.ids.iter().all(|&i| i < n));
    }

    #[test]
    fn argmax_survives_monotone_transforms(scores in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let pool = SearchPool { ids: (0..scores.len()).collect(), fraction: 1.0 };
        let a = assign_caption(0, &pool, &Table(scores.clone())).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let b = assign_caption(0, &pool, &Table(squashed)).unwrap();
        prop_assert_eq!(a.matched, b.matched);
        prop_assert_eq!(a.confidence, scores[a.matched]);
        prop_assert!(scores.iter().all(|&s| s <= a.confidence));
        prop_assert!(scores[..a.matched].iter().all(|&s| s < a.confidence));
    }

    #[test]
    fn captions_parse_back_to_their_scene(seed in any::<u64>()) {
        let scene = generate_scene(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(parse_caption(caption_of(&scene).tokens()), Some(scene));
    }

    #[test]
    fn paired_count_is_the_rounded_up_share(total in 1usize..200_000, pct in 1u32..=100) {
        let f = pct as f64 / 100.0;
        prop_assert_eq!(paired_count(total, f), (total * pct as usize).div_ceil(100));
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6f64..1.0, frac in 0.001f64..1.0, epochs in 1usize..50) {
        let mut c = ExperimentConfig { seed, epochs, ..Default::default() };
        c.adam.lr = lr;
        c.data.paired_fraction = frac;
        prop_assert_eq!(ExperimentConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn matmul_is_associative(
        a in prop::collection::vec(-1.0f64..1.0, 6),
        b in prop::collection::vec(-1.0f64..1.0, 12),
        c in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let a = Tensor::matrix(2, 3, a).unwrap();
        let b = Tensor::matrix(3, 4, b).unwrap();
        let c = Tensor::matrix(4, 2, c).unwrap();
        let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(l.data().iter().zip(r.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
