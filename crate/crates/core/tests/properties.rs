use proptest::prelude::*;
use viraal_core::active::{self, ConfidenceRecord, Criterion, QuerySpec};
use viraal_core::config::{Heads, VatConfig};
use viraal_core::corpus::Encoded;
use viraal_core::model::Batch;
use viraal_core::tape::Mat;
use viraal_core::vat::{self, kl_divergence};

fn distribution(max_dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, 2..max_dim).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

fn pair(max_dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..max_dim).prop_flat_map(|n| {
        let d = prop::collection::vec(1e-6f64..1.0, n).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        });
        (d.clone(), d)
    })
}

fn records(n: usize) -> impl Strategy<Value = Vec<ConfidenceRecord>> {
    prop::collection::vec((1e-3f64..5.0, 1e-3f64..5.0), n).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(id, (hi, hs))| ConfidenceRecord {
                id,
                conf_int: -hi,
                conf_slot: -hs,
                conf_joint: None,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_identity((p, q) in pair(20)) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn entropy_is_bounded(p in distribution(30)) {
        let h = active::entropy(&p).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn entropy_of_one_hot_is_zero(n in 1usize..50, k in 0usize..50) {
        let mut p = vec![0.0; n];
        p[k % n] = 1.0;
        prop_assert_eq!(active::entropy(&p).unwrap(), 0.0);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn joint_selection_is_scale_invariant(pool in records(100), c in 1e-3f64..1e3, budget in 1usize..100, slot in any::<bool>()) {
        let spec = QuerySpec { criterion: Criterion::EntropyJoint, budget, seed: 0 };
        let base = active::as_set(&active::select(&pool, &spec).unwrap());
        let scaled: Vec<ConfidenceRecord> = pool
            .iter()
            .map(|r| ConfidenceRecord {
                conf_int: if slot { r.conf_int } else { r.conf_int * c },
                conf_slot: if slot { r.conf_slot * c } else { r.conf_slot },
                ..r.clone()
            })
            .collect();
        prop_assert_eq!(base, active::as_set(&active::select(&scaled, &spec).unwrap()));
    }

    #[test]
    fn larger_budgets_extend_smaller_ones(pool in records(60), k in 1usize..59) {
        for criterion in [Criterion::EntropyInt, Criterion::EntropySlot, Criterion::EntropyJoint] {
            let small = active::select(&pool, &QuerySpec { criterion, budget: k, seed: 0 }).unwrap();
            let large = active::select(&pool, &QuerySpec { criterion, budget: k + 1, seed: 0 }).unwrap();
            prop_assert_eq!(&large[..k], &small[..]);
        }
    }

    #[test]
    fn finalized_perturbation_has_norm_epsilon(
        lengths in prop::collection::vec(1usize..7, 1..6),
        eps in 0.01f64..10.0,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let encoded: Vec<Encoded> = lengths
            .iter()
            .enumerate()
            .map(|(id, &n)| Encoded { id, words: vec![2; n], intent: None, slots: None })
            .collect();
        let batch = Batch::new(&encoded).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Mat::from_shape_fn((batch.len() * batch.steps, 4), |_| StandardNormal.sample(&mut rng));
        let cfg = VatConfig { epsilon: eps, ..VatConfig::default() };
        let r = vat::finalize(&g, &batch, &cfg, Heads::Joint);
        for n in r.example_norms() {
            prop_assert!((n - eps).abs() < 1e-6);
        }
        for (b, &len) in batch.lengths.iter().enumerate() {
            for t in len..batch.steps {
                prop_assert!(r.r.row(b * batch.steps + t).iter().all(|&x| x == 0.0));
            }
        }
    }
}
