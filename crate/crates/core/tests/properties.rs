use proptest::prelude::*;

use hrc::allocator::{
    brute_force_discretized, build_strategy_library, lookup_strategy, score_matrix, solve_mckp, solve_stochastic, Method, SolverConfig,
};
use hrc::baselines::lagrangian_from_predictions;
use hrc::cluster::{cluster_stats, kmeans_fit_traced, CellStats, ClusterModel, ClusterStats, KMeansConfig};
use hrc::data::{load_dataset, save_dataset};
use hrc::eval::{eom, eom_from_arms, ConstantPolicy, Estimator};
use hrc::par::Exec;
use hrc::{Dataset, DatasetKind, Sample, TreatmentSet};

fn instance(max_k: usize, max_m: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    (1..=max_k, 1..=max_m)
        .prop_flat_map(|(k, m)| {
            (
                prop::collection::vec(prop::collection::vec(-5.0..10.0f64, m), k),
                prop::collection::vec(prop::collection::vec(0.0..10.0f64, m), k),
                0.0..1.0f64,
            )
        })
        .prop_map(|(scores, costs, frac)| {
            let lo: f64 = costs.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).sum();
            let hi: f64 = costs.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).sum();
            (scores, costs, lo + frac * (hi - lo))
        })
}

fn stats_strategy(max_k: usize, max_m: usize) -> impl Strategy<Value = ClusterStats> {
    (1..=max_k, 1..=max_m).prop_flat_map(|(k, m)| {
        (prop::collection::vec(1..50usize, k), prop::collection::vec((0.0..5.0f64, 0.0..2.0f64, 0.0..3.0f64, 0.0..1.0f64), k * m)).prop_map(
            move |(sizes, cells)| ClusterStats {
                k,
                m,
                cells: cells
                    .into_iter()
                    .enumerate()
                    .map(|(idx, (r, rs, c, cs))| CellStats {
                        revenue_mean: r,
                        revenue_std: rs,
                        cost_mean: c,
                        cost_std: cs,
                        count: sizes[idx / m],
                        imputed: false,
                    })
                    .collect(),
                sizes,
            },
        )
    })
}

fn rct(rows: &[(Vec<f64>, usize, f64, f64)], m: usize) -> Dataset {
    let samples = rows
        .iter()
        .map(|(x, t, c, r)| Sample { features: x.clone(), treatment: *t, cost: *c, revenue: *r, propensity: 1.0 / m as f64 })
        .collect();
    Dataset::new(samples, DatasetKind::Rct, TreatmentSet::ordinal(m).unwrap(), rows[0].0.len()).unwrap()
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1..4usize, 2..5usize).prop_flat_map(|(d, m)| {
        prop::collection::vec((prop::collection::vec(-1e3..1e3f64, d), 0..m, 0.0..1e4f64, -1e4..1e4f64), 1..40).prop_map(move |rows| rct(&rows, m))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exact_dp_matches_enumeration((scores, costs, budget) in instance(8, 4)) {
        let dp = solve_mckp(&scores, &costs, budget, Method::ExactDp).unwrap();
        let bf = brute_force_discretized(&scores, &costs, budget).unwrap();
        prop_assert_eq!(dp.objective, bf.objective);
    }

    #[test]
    fn every_method_is_feasible((scores, costs, budget) in instance(8, 4)) {
        for method in [Method::ExactDp, Method::LagrangianSweep, Method::BruteForce] {
            let s = solve_mckp(&scores, &costs, budget, method).unwrap();
            prop_assert_eq!(s.assignment.choice.len(), scores.len());
            prop_assert!(s.assignment.choice.iter().all(|&j| j < scores[0].len()));
            let cost: f64 = s.assignment.choice.iter().enumerate().map(|(i, &j)| costs[i][j]).sum();
            prop_assert!(cost <= budget * (1.0 + 1e-12) + 1e-12, "{method}: {cost} > {budget}");
        }
    }

    #[test]
    fn lagrangian_sandwich((scores, costs, budget) in instance(8, 4)) {
        let s = solve_mckp(&scores, &costs, budget, Method::LagrangianSweep).unwrap();
        let (dual, gap) = (s.dual_bound.unwrap(), s.gap.unwrap());
        prop_assert!(s.objective <= dual + 1e-9 * dual.abs().max(1.0));
        prop_assert!(gap >= 0.0);
        prop_assert!((gap - (dual - s.objective)).abs() <= 1e-9 * dual.abs().max(1.0));
        let exact = solve_mckp(&scores, &costs, budget, Method::BruteForce).unwrap();
        prop_assert!(s.objective <= exact.objective + 1e-9 * exact.objective.abs().max(1.0));
    }

    #[test]
    fn risk_term_nonincreasing_in_lambda(stats in stats_strategy(6, 4), frac in 0.0..1.0f64, l1 in 0.0..2.0f64, dl in 0.0..2.0f64) {
        let sm = score_matrix(&stats, 0.0, 0.1);
        let lo: f64 = sm.costs.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).sum();
        let hi: f64 = sm.costs.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).sum();
        let budget = lo + frac * (hi - lo);
        let a = solve_stochastic(&stats, budget, l1, 0.1, Method::ExactDp).unwrap();
        let b = solve_stochastic(&stats, budget, l1 + dl, 0.1, Method::ExactDp).unwrap();
        let spread_a = sm.revenue_spread_of(&a.assignment.choice);
        let spread_b = sm.revenue_spread_of(&b.assignment.choice);
        prop_assert!(spread_b <= spread_a + 1e-9 * spread_a.max(1.0), "{spread_b} > {spread_a}");
    }

    #[test]
    fn library_is_monotone_and_feasible(stats in stats_strategy(6, 4), steps in prop::collection::vec(0.01..1.0f64, 1..6)) {
        let sm = score_matrix(&stats, 0.1, 0.1);
        let lo: f64 = sm.costs.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).sum();
        let mut grid = Vec::new();
        let mut b = lo;
        for s in steps {
            b += s * (1.0 + lo);
            grid.push(b);
        }
        let lib = build_strategy_library(&stats, &SolverConfig::new(grid.clone())).unwrap();
        prop_assert_eq!(lib.entries.len(), grid.len());
        for w in lib.entries.windows(2) {
            prop_assert!(w[1].expected_revenue >= w[0].expected_revenue);
        }
        for e in &lib.entries {
            prop_assert!(e.expected_cost <= e.budget * (1.0 + 1e-12) + 1e-12);
            prop_assert_eq!(lookup_strategy(&lib, e.budget).unwrap(), e);
        }
    }

    #[test]
    fn lagrangian_cost_falls_with_multiplier(preds in prop::collection::vec((prop::collection::vec(0.0..5.0f64, 3), prop::collection::vec(0.0..2.0f64, 3)), 1..30), frac in 0.0..1.0f64) {
        let lo: f64 = preds.iter().map(|(_, c)| c.iter().copied().fold(f64::INFINITY, f64::min)).sum();
        let hi: f64 = preds.iter().map(|(_, c)| c.iter().copied().fold(0.0, f64::max)).sum();
        let alloc = lagrangian_from_predictions(&preds, lo + frac * (hi - lo)).unwrap();
        let mut trace = alloc.trace.clone();
        trace.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in trace.windows(2) {
            prop_assert!(w[1].1 <= w[0].1 + 1e-9);
        }
        prop_assert!(alloc.assignment.expected_cost <= lo + frac * (hi - lo) + 1e-9);
    }

    #[test]
    fn dataset_round_trip(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path, ds.treatments()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn cohort_accounting(ds in dataset_strategy(), salt in any::<u64>()) {
        let m = ds.num_treatments();
        let arms: Vec<usize> = (0..ds.len()).map(|i| ((i as u64).wrapping_mul(2654435761) ^ salt) as usize % m).collect();
        let e = eom_from_arms(&ds, &arms, Estimator::Matched).unwrap();
        prop_assert_eq!(e.arm_counts.iter().sum::<usize>(), ds.len());
        let matched = ds.samples().iter().zip(&arms).filter(|(s, a)| s.treatment == **a).count();
        prop_assert_eq!(e.match_count, matched);
    }

    #[test]
    fn constant_control_is_cohort_mean(ds in dataset_strategy()) {
        let control: Vec<f64> = ds.samples().iter().filter(|s| s.treatment == 0).map(|s| s.revenue).collect();
        let e = eom(&ds, &ConstantPolicy(0)).unwrap();
        if control.is_empty() {
            prop_assert_eq!(e.degenerate_arms, vec![0]);
        } else {
            prop_assert_eq!(e.revenue_mean, control.iter().sum::<f64>() / control.len() as f64);
        }
    }

    #[test]
    fn cluster_accounting_and_relabeling(points in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 2), 12..60), k in 1..5usize, seed in any::<u64>()) {
        let distinct = {
            let mut p = points.clone();
            p.sort_by(|a, b| a.partial_cmp(b).unwrap());
            p.dedup();
            p.len()
        };
        prop_assume!(distinct >= k);
        let (model, trace) = kmeans_fit_traced(&points, &KMeansConfig::new(k, seed)).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        let labels = model.assign_batch(&points, Exec::Sequential);
        let rows: Vec<_> = points.iter().enumerate().map(|(i, x)| (x.clone(), i % 2, 1.0, x[0])).collect();
        let ds = rct(&rows, 2);
        let stats = cluster_stats(&ds, &labels, k, None).unwrap();
        prop_assert_eq!(stats.sizes.iter().sum::<usize>(), points.len());
        for i in 0..k {
            prop_assert_eq!((0..2).map(|j| stats.cell(i, j).count).sum::<usize>(), stats.sizes[i]);
        }
        // Reversing the centers reverses the labels, except on exact ties.
        let mut rev = model.centers().to_vec();
        rev.reverse();
        let flipped = ClusterModel::from_centers(rev.clone()).unwrap();
        for (x, &l) in points.iter().zip(&labels) {
            let d = |c: &[f64]| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = d(&model.centers()[l]);
            let tied = model.centers().iter().filter(|c| d(c) == best).count();
            if tied == 1 {
                prop_assert_eq!(flipped.assign(x), k - 1 - l);
            }
        }
    }
}
