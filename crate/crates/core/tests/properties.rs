use proptest::prelude::*;

use autotune_core::dehb::{de_crossover, de_mutate};
use autotune_core::objectives::Orientation;
use autotune_core::pbt::{exploit, LineageEntry, Schedule};
use autotune_core::protocol::{rank_methods, ScoreTable, SeedPlan};
use autotune_core::seeding::rng_from;
use autotune_core::space::{ConfigSpace, Configuration, PerturbSettings, Value};
use autotune_core::sweeps::table_flags;

fn mixed_space() -> ConfigSpace {
    "lr: log(1e-6, 0.1)\nclip: (0.0, 1.0)\nlayers: int[1, 12]\nbatch: {16, 32, 64, 128}\nbeta: (-3.5, 2.0)"
        .parse()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sampled_configs_are_valid_and_canonical(seed in any::<u64>()) {
        let space = mixed_space();
        let c = space.sample(&mut rng_from(&[seed]));
        prop_assert!(space.validate(&c).is_ok());
        let canon = space.canonicalize(&c).unwrap();
        prop_assert_eq!(&canon, &c);
        prop_assert_eq!(space.canonicalize(&canon).unwrap(), canon);
    }

    #[test]
    fn unit_vectors_decode_to_valid_configs(unit in prop::collection::vec(0.0f64..=1.0, 5)) {
        let space = mixed_space();
        let c = space.from_unit(&unit).unwrap();
        prop_assert!(space.validate(&c).is_ok());
        let back = space.to_unit(&c).unwrap();
        prop_assert!(back.iter().all(|u| (0.0..=1.0).contains(u)));
        prop_assert_eq!(space.from_unit(&back).unwrap(), c);
    }

    #[test]
    fn perturbation_stays_in_bounds(seed in any::<u64>(), up in 1.0f64..3.0, down in 0.1f64..1.0, p in 0.0f64..=1.0) {
        let space = mixed_space();
        let mut rng = rng_from(&[seed]);
        let settings = PerturbSettings { factor_up: up, factor_down: down, resample_prob: p };
        let mut c = space.sample(&mut rng);
        for _ in 0..10 {
            c = space.perturb(&c, &mut rng, &settings).unwrap();
            prop_assert!(space.validate(&c).is_ok());
        }
    }

    #[test]
    fn identity_perturbation_changes_nothing(seed in any::<u64>()) {
        let space = mixed_space();
        let mut rng = rng_from(&[seed]);
        let c = space.sample(&mut rng);
        let settings = PerturbSettings { factor_up: 1.0, factor_down: 1.0, resample_prob: 0.0 };
        prop_assert_eq!(space.perturb(&c, &mut rng, &settings).unwrap(), c);
    }

    #[test]
    fn evolved_vectors_stay_in_the_unit_cube(
        seed in any::<u64>(),
        pool in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 3), 0..8),
        f in 0.0f64..2.0,
        cr in 0.0f64..=1.0,
    ) {
        let mut rng = rng_from(&[seed]);
        let exclude = if pool.is_empty() { None } else { Some(0) };
        let donor = de_mutate(&pool, exclude, f, 3, &mut rng);
        let target: Vec<f64> = pool.first().cloned().unwrap_or_else(|| vec![0.5; 3]);
        let child = de_crossover(&target, &donor, cr, &mut rng);
        prop_assert!(donor.iter().chain(&child).all(|x| (0.0..=1.0).contains(x)));
        // At least one coordinate always comes from the donor.
        prop_assert!(child.iter().zip(&donor).any(|(c, d)| c == d));
    }

    #[test]
    fn exploit_pairs_worst_with_best(costs in prop::collection::vec(-100.0f64..100.0, 1..40), q in 0.01f64..=0.5) {
        let plan = exploit(&costs, q);
        let k = (q * costs.len() as f64 + 1e-9).floor() as usize;
        prop_assert_eq!(plan.len(), k);
        let mut order: Vec<usize> = (0..costs.len()).collect();
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        for (i, (loser, winner)) in plan.iter().enumerate() {
            prop_assert_eq!(*winner, order[i]);
            prop_assert_eq!(*loser, order[costs.len() - 1 - i]);
            prop_assert!(costs[*winner] <= costs[*loser]);
        }
        let losers: Vec<usize> = plan.iter().map(|p| p.0).collect();
        prop_assert!(plan.iter().all(|p| !losers.contains(&p.1)));
    }

    #[test]
    fn ranks_are_bounded_and_the_best_is_first(
        cells in prop::collection::vec((0.0f64..100.0, 0.0f64..10.0), 2..7),
        envs in 1usize..4,
    ) {
        let mut t = ScoreTable::new(Orientation::HigherIsBetter);
        for e in 0..envs {
            for (m, (mean, std)) in cells.iter().enumerate() {
                t.push(&format!("e{e}"), &format!("m{m}"), mean + e as f64, *std);
            }
        }
        let r = rank_methods(&t).unwrap();
        let n = cells.len();
        for row in &r.ranks {
            prop_assert!(row.iter().all(|&x| x >= 1 && x <= n));
            let best = (0..n).max_by(|&a, &b| cells[a].0.total_cmp(&cells[b].0)).unwrap();
            prop_assert_eq!(row[best], 1);
        }
        for m in 0..n {
            prop_assert!(r.mean_ranks[m] >= 1.0 && r.mean_ranks[m] <= n as f64);
        }
    }

    #[test]
    fn schedule_follows_the_lineage(changes in prop::collection::vec((1usize..10, 0u8..4), 0..6)) {
        let value = |v: u8| Configuration::new().with("x", Value::Float(v as f64 / 4.0));
        let mut lineage = vec![LineageEntry { interval: 0, source: 0, config: value(0) }];
        let mut at = 0;
        for (step, v) in changes {
            at = (at + step).min(10);
            lineage.push(LineageEntry { interval: at, source: 1, config: value(v) });
        }
        let s = Schedule::from_lineage(&lineage, 10);
        for i in 0..10 {
            let expected = lineage.iter().rfind(|e| e.interval <= i).unwrap();
            prop_assert_eq!(s.config_at(i as f64 / 10.0), &expected.config);
        }
        prop_assert!(s.breakpoints.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 != w[1].1));
    }

    #[test]
    fn overlapping_seed_plans_are_rejected(tuning in prop::collection::btree_set(0u64..30, 1..6), test in prop::collection::btree_set(0u64..30, 1..6)) {
        let overlap = tuning.intersection(&test).next().is_some();
        let plan = SeedPlan::new(tuning.into_iter().collect(), test.into_iter().collect());
        prop_assert_eq!(plan.is_err(), overlap);
    }

    #[test]
    fn identical_sweep_rows_are_flat(mean in -10.0f64..10.0, std in 0.0f64..1.0, n in 1usize..6) {
        let rows = vec![(mean, std, mean); n];
        let f = table_flags(&rows, Orientation::LowerIsBetter).unwrap();
        prop_assert!(f.worst_within_best_band);
    }
}
