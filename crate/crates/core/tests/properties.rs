use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsegrow::config::ExperimentConfig;
use sparsegrow::data::Dataset;
use sparsegrow::fit::PlateauRule;
use sparsegrow::growth::{weighted_sample_without_replacement, GrowthMethod};
use sparsegrow::model::{decode_snapshot, encode_snapshot, ArchSpec, MaskedNetwork};
use sparsegrow::pathscore::tau_core;
use sparsegrow::seed::{init_phew, target_edges};
use sparsegrow::train::RoughTrainPolicy;

fn mlp(widths: &[usize]) -> ArchSpec {
    let id: Vec<String> = widths.iter().map(usize::to_string).collect();
    ArchSpec::from_id(&format!("mlp-{}", id.join("-"))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn config_round_trips(
        gamma in 0.01f64..2.0,
        tau in 0.05f64..1.0,
        density in 0.001f64..1.0,
        seeds in prop::collection::vec(0..=i64::MAX as u64, 1..5),
        patience in 1usize..10,
        fixed in any::<bool>(),
        method in 0usize..4,
        of_gain in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.growth.gamma = gamma;
        cfg.growth.method = [GrowthMethod::Pwmpr, GrowthMethod::Pwmp, GrowthMethod::Random, GrowthMethod::Gradient][method];
        cfg.stopping.tau = tau;
        cfg.stopping.plateau = if of_gain { PlateauRule::OfGain } else { PlateauRule::OfAsymptote };
        cfg.init.density = density;
        cfg.seeds = seeds;
        cfg.rough = if fixed {
            RoughTrainPolicy::Fixed { epochs: patience }
        } else {
            RoughTrainPolicy::Adaptive { patience, max_epochs: patience + 5 }
        };
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn oversized_seeds_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds = vec![1, seed];
        let err = cfg.validate().unwrap_err().to_string();
        prop_assert!(err.contains("seeds"), "{}", err);
    }

    #[test]
    fn tau_core_is_the_shortest_covering_prefix(
        c in prop::collection::vec(0.0f64..10.0, 1..40),
        tau in 0.05f64..0.99,
    ) {
        let total: f64 = c.iter().sum();
        prop_assume!(total > 0.0);
        let core = tau_core(&c, tau).unwrap();
        let covered: f64 = core.iter().map(|&i| c[i]).sum();
        prop_assert!(covered >= tau * total * (1.0 - 1e-9));
        let without_last = covered - c[*core.last().unwrap()];
        prop_assert!(without_last < tau * total);
        for w in core.windows(2) {
            prop_assert!(c[w[0]] >= c[w[1]]);
        }
        // nothing outside the core beats anything inside it
        let smallest = core.iter().map(|&i| c[i]).fold(f64::INFINITY, f64::min);
        for (i, &v) in c.iter().enumerate() {
            if !core.contains(&i) {
                prop_assert!(v <= smallest);
            }
        }
    }

    #[test]
    fn weighted_draws_are_distinct_and_positive(
        w in prop::collection::vec(prop_oneof![Just(0.0), 0.001f64..5.0], 1..60),
        m in 0usize..70,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (idx, fallback) = weighted_sample_without_replacement(&w, m, &mut rng);
        prop_assert_eq!(idx.len(), m.min(w.len()));
        let mut seen = idx.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), idx.len());
        let positive = w.iter().filter(|&&x| x > 0.0).count();
        if m <= positive {
            prop_assert!(!fallback);
            prop_assert!(idx.iter().all(|&i| w[i] > 0.0));
        }
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded(n in 2usize..200, frac in 0.05f64..0.9, seed in any::<u64>()) {
        let ds = Dataset::new((0..n).map(|i| i as f32).collect(), vec![1], (0..n).map(|i| i % 3).collect(), 3).unwrap();
        let (tr, va) = ds.split(frac, seed).unwrap();
        prop_assert_eq!(tr.len() + va.len(), n);
        prop_assert_eq!(va.len(), (n as f64 * frac).round() as usize);
        let mut all: Vec<u32> = tr.features.iter().chain(&va.features).map(|&x| x as u32).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n as u32).collect::<Vec<_>>());
        let (tr2, _) = ds.split(frac, seed).unwrap();
        prop_assert_eq!(tr.features, tr2.features);
    }

    #[test]
    fn snapshots_round_trip(widths in prop::collection::vec(1usize..7, 3..6), rho in 0.1f64..1.0, seed in any::<u64>()) {
        let mut net = MaskedNetwork::<f64>::from_arch(&mlp(&widths), seed).unwrap();
        init_phew(&mut net, rho, seed).unwrap();
        let back: MaskedNetwork<f64> = decode_snapshot(&encode_snapshot(&net).unwrap()).unwrap();
        for (a, b) in net.layers().iter().zip(back.layers()) {
            prop_assert_eq!(a.mask().bits(), b.mask().bits());
            prop_assert_eq!(a.weight().data(), b.weight().data());
        }
    }

    #[test]
    fn phew_meets_its_edge_target(widths in prop::collection::vec(2usize..9, 3..6), rho in 0.05f64..0.9, seed in any::<u64>()) {
        let mut net = MaskedNetwork::<f32>::from_arch(&mlp(&widths), seed).unwrap();
        let n = net.prunable_params();
        init_phew(&mut net, rho, seed).unwrap();
        let target = target_edges(rho, n);
        let nnz = net.prunable_nnz();
        // a walk touches at most one edge per layer
        prop_assert!(nnz >= target && nnz < target + widths.len());
        for l in net.layers().iter().filter(|l| l.prunable()) {
            for (&on, &w) in l.mask().bits().iter().zip(l.weight().data()) {
                prop_assert!(on || w == 0.0);
            }
        }
    }
}
