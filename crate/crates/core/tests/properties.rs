mod common;

use std::sync::Arc;

use common::{client, quad};
use mimic_sim::aggregation::Algorithm;
use mimic_sim::availability::{
    round_robin_schedule, static_prob_schedule, weighted_sample_schedule, AvailabilitySchedule,
};
use mimic_sim::data::{make_synthetic_classification, partition_shards, PartitionSpec};
use mimic_sim::diagnostics::{metrics_csv, objective_bias, parse_metrics_csv, RoundMetrics};
use mimic_sim::objectives::Objective;
use mimic_sim::rng::Purpose;
use mimic_sim::schedules::{check_conditions, lemma6_schedule, ConditionParams, LrSchedule};
use mimic_sim::{Federation, LocalConfig, ParamVector, RngContract};
use proptest::prelude::*;
use rand::Rng;

fn finite(range: f64) -> impl Strategy<Value = f64> {
    -range..range
}

fn schedule_strategy(n: usize, t: usize) -> impl Strategy<Value = AvailabilitySchedule> {
    proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), t - 1).prop_map(move |masks| {
        let mut sets = vec![(0..n).collect::<Vec<_>>()];
        sets.extend(masks.into_iter().map(|m| (0..n).filter(|&i| m[i]).collect()));
        AvailabilitySchedule::from_sets(n, sets).unwrap()
    })
}

fn logistic_clients(n: usize, seed: u64) -> Vec<Objective> {
    let ds = make_synthetic_classification(3, 2 * n, 2, 1.5, seed).unwrap();
    partition_shards(&ds, &PartitionSpec::new(n, 2, seed))
        .unwrap()
        .into_iter()
        .map(|c| Objective::logistic(Arc::new(c), 3, 0.01).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quadratic_gradient_is_w_minus_mean(
        points in proptest::collection::vec(proptest::collection::vec(finite(10.0), 3), 1..12),
        w in proptest::collection::vec(finite(10.0), 3),
    ) {
        let obj = quad(0, &points);
        let w = ParamVector::from_vec(w);
        let mut mean = vec![0.0; 3];
        for p in &points {
            for k in 0..3 {
                mean[k] += p[k] / points.len() as f64;
            }
        }
        let g = obj.full_grad(&w).unwrap();
        for k in 0..3 {
            prop_assert!((g[k] - (w[k] - mean[k])).abs() <= 1e-12);
        }
        prop_assert_eq!(obj.smoothness(), 1.0);
    }

    #[test]
    fn logistic_gradients_are_lipschitz_with_the_reported_constant(
        rows in proptest::collection::vec((0usize..2, proptest::collection::vec(finite(5.0), 2)), 2..10),
        a in proptest::collection::vec(finite(4.0), 3),
        b in proptest::collection::vec(finite(4.0), 3),
        reg in 0.0..1.0f64,
    ) {
        let rows: Vec<(f64, Vec<f64>)> = rows.into_iter().map(|(y, x)| (y as f64, x)).collect();
        let obj = Objective::logistic(client(0, 2, rows), 2, reg).unwrap();
        let (a, b) = (ParamVector::from_vec(a), ParamVector::from_vec(b));
        let lhs = obj.full_grad(&a).unwrap().dist(&obj.full_grad(&b).unwrap());
        prop_assert!(lhs <= obj.smoothness() * a.dist(&b) * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn vector_arithmetic_stays_finite_and_sized(
        v in proptest::collection::vec(finite(1e6), 1..20),
        alpha in finite(1e3),
    ) {
        let a = ParamVector::from_vec(v.clone());
        let b = ParamVector::from_vec(v.iter().map(|x| x * 0.5 + 1.0).collect());
        let mut c = a.clone();
        c.axpy(alpha, &b);
        prop_assert_eq!(c.len(), a.len());
        prop_assert!(c.is_finite());
        prop_assert!(a.add(&b).sub(&b).max_abs_diff(&a) <= 1e-9 * (1.0 + a.norm()));
    }

    #[test]
    fn shard_partitions_conserve_samples_and_labels(
        n in 1usize..8, spc in 1usize..4, per_class in 1usize..5, seed in any::<u64>(),
    ) {
        // one shard per class, so every client holds exactly `spc` labels
        let classes = (n * spc).max(2);
        let n = classes / spc;
        prop_assume!(n * spc == classes);
        let ds = make_synthetic_classification(classes, per_class, 2, 1.0, seed).unwrap();
        let clients = partition_shards(&ds, &PartitionSpec::new(n, spc, seed)).unwrap();
        prop_assert_eq!(clients.iter().map(|c| c.len()).sum::<usize>(), ds.len());
        for c in &clients {
            prop_assert_eq!(c.data.distinct_labels(), spc);
        }
    }

    #[test]
    fn generated_schedules_are_well_formed(
        n in 1usize..20, t in 2usize..200, tau in 1usize..15, p in 0.05..1.0f64, ratio in 0.1..1.0f64, seed in any::<u64>(),
    ) {
        let rr = round_robin_schedule(n, t, tau, seed).unwrap();
        prop_assert!(rr.max_staleness().unwrap() <= tau);
        let sp = static_prob_schedule(n, t, p, seed, true).unwrap();
        prop_assert!(sp.max_staleness().is_ok());
        if let Ok(w) = weighted_sample_schedule(n, t, ratio, seed, true) {
            let k = (ratio * n as f64).round() as usize;
            prop_assert!((1..t).all(|s| w.active(s).len() == k));
        }
        for s in [&rr, &sp] {
            for step in 0..t {
                let a = s.active(step);
                prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(a.iter().all(|&i| i < n));
            }
        }
    }

    #[test]
    fn mimic_corrections_track_the_applied_update(schedule in schedule_strategy(5, 25), seed in 0u64..1000) {
        let objs = logistic_clients(5, seed);
        let dim = objs[0].dim();
        let local = LocalConfig::new(2, 0.05, 2);
        let mut fed = Federation::new(objs, ParamVector::zeros(dim), Algorithm::Mimic, local, RngContract::new(seed)).unwrap();
        for t in 0..25 {
            let active = schedule.active(t);
            let uploads = fed.uploads(active, mimic_sim::BatchMode::Training).unwrap();
            let before = fed.model().clone();
            let Some(r) = fed.step(active, 0.5).unwrap() else {
                prop_assert_eq!(fed.model(), &before);
                continue;
            };
            let mut expected = before;
            expected.axpy(-0.5, &r.update);
            prop_assert_eq!(fed.model(), &expected);
            for u in &uploads {
                let c = fed.server().correction(u.client).unwrap();
                prop_assert!(c.max_abs_diff(&r.update.sub(&u.local_update)) <= 1e-12);
            }
        }
    }

    #[test]
    fn mimic_corrections_sum_to_zero_under_full_participation(rounds in 1usize..40, seed in 0u64..1000) {
        let objs = logistic_clients(4, seed);
        let dim = objs[0].dim();
        let mut fed = common::exact_federation(objs, ParamVector::zeros(dim), Algorithm::Mimic);
        for _ in 0..rounds {
            fed.step(&[0, 1, 2, 3], 0.5).unwrap();
        }
        let cs: Vec<ParamVector> = (0..4).map(|i| fed.server().correction(i).unwrap().clone()).collect();
        prop_assert!(ParamVector::mean(&cs).unwrap().norm() <= 1e-12);
    }

    #[test]
    fn mifa_stamps_record_last_activity(schedule in schedule_strategy(4, 20)) {
        let objs = logistic_clients(4, 1);
        let dim = objs[0].dim();
        let mut fed = common::exact_federation(objs, ParamVector::zeros(dim), Algorithm::Mifa);
        for t in 0..20 {
            fed.step(schedule.active(t), 0.3).unwrap();
            for i in 0..4 {
                let last = (0..=t).rev().find(|&s| schedule.is_active(s, i)).unwrap();
                prop_assert_eq!(fed.server().memorized(i).unwrap().1, last);
            }
        }
    }

    #[test]
    fn learning_rates_are_positive(
        counts in proptest::collection::vec(0usize..10, 2..100),
        c in 1e-4..10.0f64, beta in 0.5..100.0f64, decay in 0.5..1.0f64,
    ) {
        for sched in [
            LrSchedule::Lemma6 { c, beta },
            LrSchedule::Exponential { initial: c, decay },
            LrSchedule::Constant { lr: c },
        ] {
            let r = sched.realize(&counts).unwrap();
            prop_assert_eq!(r.etas.len(), counts.len());
            prop_assert!(r.etas.iter().all(|&e| e > 0.0 && e.is_finite()));
        }
    }

    #[test]
    fn lemma6_ratio_ignores_participation(
        counts in proptest::collection::vec(1usize..30, 2..60), c in 1e-3..1.0f64, beta in 1.0..100.0f64,
    ) {
        let s = lemma6_schedule(c, beta, &counts).unwrap();
        let p = ConditionParams { nu: 1e-3, phi_k: 2.0, tau_max: 3, num_clients: 30, smoothness: 1.0, local_lr: 0.01, local_steps: 1 };
        let report = check_conditions(&s.etas, &counts, p).unwrap();
        prop_assert_eq!(report.iterations.len(), counts.len() - 1);
        for it in &report.iterations {
            let expected = (it.t as f64 + 1.0 + beta) / (it.t as f64 + beta);
            prop_assert!((it.rho - expected).abs() <= 1e-12 * expected);
        }
        prop_assert!(report.rho_pass);
    }

    #[test]
    fn objective_bias_is_non_negative(active in proptest::collection::btree_set(0usize..5, 1..5), w in finite(5.0)) {
        let objs: Vec<Objective> = (0..5).map(|i| common::quad1(i, &[i as f64, -(i as f64) * 0.5])).collect();
        let active: Vec<usize> = active.into_iter().collect();
        let g = objective_bias(&active, &ParamVector::from_vec(vec![w]), &objs).unwrap();
        prop_assert!(g >= 0.0 && g.is_finite());
    }

    #[test]
    fn metrics_csv_round_trips_exactly(
        rows in proptest::collection::vec(
            (finite(1e3), 0.0..1e-300f64, proptest::option::of(0.0..1e9f64), proptest::option::of(0.0..1.0f64), 0usize..50),
            1..20,
        )
    ) {
        let rows: Vec<RoundMetrics> = rows
            .into_iter()
            .enumerate()
            .map(|(t, (loss, g, e, acc, n))| RoundMetrics {
                t,
                loss,
                grad_norm2: g,
                error: e,
                gamma: e,
                phi_hat: None,
                n_active: n,
                uploads: t * 3,
                accuracy: acc,
                eta: acc,
            })
            .collect();
        prop_assert_eq!(parse_metrics_csv(&metrics_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn rng_streams_do_not_depend_on_draw_order(master in any::<u64>(), client in 0u64..100, t in 0u64..1000) {
        let contract = RngContract::new(master);
        let direct: Vec<u64> = {
            let mut r = contract.stream(Purpose::Batch, client, t, 0);
            (0..4).map(|_| r.random()).collect()
        };
        let mut other = contract.stream(Purpose::Replay, client, t, 0);
        let _: u64 = other.random();
        let mut again = contract.stream(Purpose::Batch, client, t, 0);
        let _: u64 = other.random();
        let later: Vec<u64> = (0..4).map(|_| again.random()).collect();
        prop_assert_eq!(direct, later);
    }
}
