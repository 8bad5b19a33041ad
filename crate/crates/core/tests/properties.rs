use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resource_lab::allocometer::{
    self, attribute_parallel, detect_allocated, match_symmetric_pairs, redundancy_on, redundant_partners_on,
    regressor_errors_and_correlation, uniform_grid, MatchingStrategy, ProbeConfig,
};
use resource_lab::netcore::{NetworkParams, NetworkShape};
use resource_lab::resource_model::{
    ensemble_mse, fit_power_law, predict_parallel_loss, predict_series_loss, separability_decomposition,
    solve_allocation, solve_allocation_bruteforce, AllocationProblem, EnsembleSpec,
};
use resource_lab::tasks::{self, lookup};

fn random_net(shape: &NetworkShape, seed: u64, gain: f64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetworkParams::init_uniform(shape, &mut rng).unwrap();
    for l in p.layers_mut() {
        l.weights.mapv_inplace(|w| gain * w);
        l.biases.mapv_inplace(|b| gain * b);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn task_loss_is_row_permutation_invariant(seed in 0u64..10_000, rows in 2usize..40) {
        let task = tasks::make_parallel_task("square", "square", 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = tasks::sample_batch(&task, rows, &mut rng).unwrap();
        let preds = Array2::from_shape_fn((rows, 2), |(i, j)| (i * 7 + j) as f64 * 0.01);
        let base = tasks::task_loss(&task, preds.view(), &batch).unwrap();
        let order: Vec<usize> = (0..rows).rev().collect();
        let p2 = preds.select(Axis(0), &order);
        let shuffled = tasks::Batch {
            inputs: batch.inputs.select(Axis(0), &order),
            targets: batch.targets.select(Axis(0), &order),
        };
        let permuted = tasks::task_loss(&task, p2.view(), &shuffled).unwrap();
        prop_assert!((base - permuted).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn allocation_is_linear_in_budget(
        a in prop::collection::vec(0.01f64..100.0, 2..6),
        budget in 1.0f64..1e4,
        scale in 0.1f64..50.0,
    ) {
        let p = AllocationProblem::with_default_costs(a.clone(), budget).unwrap();
        let q = AllocationProblem::with_default_costs(a, budget * scale).unwrap();
        let s = solve_allocation(&p).unwrap();
        let t = solve_allocation(&q).unwrap();
        for (x, y) in s.allocations.iter().zip(&t.allocations) {
            prop_assert!((x * scale - y).abs() <= 1e-12 * y.abs());
        }
        prop_assert!((p.spent(&s.allocations) - budget).abs() <= 1e-9 * budget);
        prop_assert!(s.allocations.iter().all(|&n| n > 0.0));
    }

    #[test]
    fn allocation_argmin_ignores_common_importance_factor(
        a in prop::collection::vec(0.01f64..100.0, 2..6),
        c in prop::collection::vec(0.5f64..4.0, 6),
        factor in 0.01f64..100.0,
    ) {
        let costs = c[..a.len()].to_vec();
        let p = AllocationProblem::new(a.clone(), costs.clone(), 100.0).unwrap();
        let q = AllocationProblem::new(a.iter().map(|v| v * factor).collect(), costs, 100.0).unwrap();
        let s = solve_allocation(&p).unwrap();
        let t = solve_allocation(&q).unwrap();
        for (x, y) in s.allocations.iter().zip(&t.allocations) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs());
        }
        prop_assert!((t.loss - factor * s.loss).abs() <= 1e-10 * t.loss);
    }

    #[test]
    fn predictors_are_homogeneous_of_degree_minus_one(
        n1 in 0.1f64..1e4, n2 in 0.1f64..1e4, beta in 0.0f64..1.0, s in 0.1f64..20.0,
        a in 0.0f64..10.0, b in 0.0f64..10.0,
    ) {
        let betas = [beta, 1.0 - beta];
        let base = predict_parallel_loss(&betas, &[n1, n2], &[a, b]).unwrap();
        let scaled = predict_parallel_loss(&betas, &[s * n1, s * n2], &[a, b]).unwrap();
        prop_assert!((scaled * s - base).abs() <= 1e-12 * base.max(1e-300));
        let base = predict_series_loss((a, b), (n1, n2)).unwrap();
        let scaled = predict_series_loss((a, b), (s * n1, s * n2)).unwrap();
        prop_assert!((scaled * s - base).abs() <= 1e-12 * base.max(1e-300));
    }

    #[test]
    fn power_law_recovery_is_exact(
        exponent in prop::sample::select(vec![-2.0, -1.0, -0.5, 0.0, 1.0]),
        log_c in -3.0f64..3.0,
        xs in prop::collection::btree_set(1u32..10_000, 3..30),
    ) {
        let pts: Vec<(f64, f64)> = xs.iter().map(|&x| {
            let x = x as f64;
            (x, (log_c + exponent * x.ln()).exp())
        }).collect();
        let f = fit_power_law(&pts).unwrap();
        prop_assert!((f.exponent - exponent).abs() < 1e-9);
        prop_assert!((f.log_coefficient - log_c).abs() < 1e-9);
    }

    #[test]
    fn separability_terms_sum_to_composite_mse(seed in 0u64..1000, amp_g in 0.0f64..0.3, amp_f in 0.0f64..0.3) {
        let f = lookup("sqrt").unwrap();
        let g = lookup("sq_diff").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = tasks::make_series_task().unwrap();
        let x = tasks::sample_inputs(&task, 2000, &mut rng);
        let g_hat = move |v: &[f64]| (g.eval)(v) * (1.0 + amp_g * (3.0 * v[1]).cos());
        let f_hat = move |v: f64| v.sqrt() * (1.0 - amp_f) + amp_f * v;
        let r = separability_decomposition(&f, &g, &g_hat, &f_hat, x.view()).unwrap();
        prop_assert!(r.term_g >= 0.0 && r.term_f >= 0.0);
        prop_assert!((r.term_g + r.term_f + r.cross_term - r.total).abs() < 1e-10);
    }

    #[test]
    fn detection_is_deterministic_and_monotone(seed in 0u64..1000, probe_seed in 0u64..1000) {
        let shape = NetworkShape::new(1, vec![40, 20], 1).unwrap();
        let p = random_net(&shape, seed, 1.0);
        let task = tasks::make_single_task("square").unwrap();
        let cfg = |t: f64| ProbeConfig { samples: 1000, seed: probe_seed, variance_threshold: t, ..Default::default() };
        let a = detect_allocated(&p, &task, &cfg(1e-3)).unwrap();
        let b = detect_allocated(&p, &task, &cfg(1e-3)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.total_allocated, a.per_layer_live.iter().sum::<usize>());
        let mut prev = a.total_allocated;
        for t in [3e-3, 1e-2, 3e-2, 1e-1] {
            let n = detect_allocated(&p, &task, &cfg(t)).unwrap().total_allocated;
            prop_assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn attribution_partitions_first_layer(seed in 0u64..10_000, width in 1usize..80, zero_frac in 0.0f64..1.0) {
        let shape = NetworkShape::new(2, vec![width], 2).unwrap();
        let mut p = random_net(&shape, seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        p.layers_mut()[0].weights.mapv_inplace(|w| {
            if rand::Rng::random::<f64>(&mut rng) < zero_frac { 0.0 } else { w }
        });
        let a = attribute_parallel(&p, 1e-3).unwrap();
        prop_assert_eq!(a.task1 + a.task2 + a.superposed + a.dead, width);
    }

    #[test]
    fn redundancy_counts_are_symmetric_and_bounded(seed in 0u64..1000) {
        let shape = NetworkShape::new(2, vec![24], 1).unwrap();
        let p = random_net(&shape, seed, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((1000, 2), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let r = redundancy_on(&p, x.view(), 1e-3, 0.75).unwrap();
        for &c in &r.counts[0] {
            prop_assert!(c <= 23);
        }
        prop_assert!((0.0..=1.0).contains(&r.fraction_nonzero));
        let (partners, _) = redundant_partners_on(&p, x.view(), 1e-3, 0.75).unwrap();
        for (i, ps) in partners[0].iter().enumerate() {
            prop_assert_eq!(ps.len(), r.counts[0][i]);
            for &j in ps {
                prop_assert!(partners[0][j].contains(&i));
            }
        }
    }

    #[test]
    fn pairing_is_a_valid_partial_matching(
        seed in 0u64..10_000,
        width in 2usize..30,
        cap in 0.05f64..1.0,
        optimal in any::<bool>(),
    ) {
        let shape = NetworkShape::new(1, vec![width], 1).unwrap();
        let p = random_net(&shape, seed, 1.0);
        let all: Vec<usize> = (0..width).collect();
        let strategy = if optimal { MatchingStrategy::Optimal } else { MatchingStrategy::Greedy };
        let r = match_symmetric_pairs(&p, &all, cap, strategy).unwrap();
        let mut seen = vec![false; width];
        for q in &r.pairs {
            prop_assert!(q.cost <= cap && q.cost >= 0.0);
            prop_assert!(!seen[q.first] && !seen[q.second]);
            seen[q.first] = true;
            seen[q.second] = true;
        }
        for &u in &r.unmatched {
            prop_assert!(!seen[u]);
        }
        prop_assert_eq!(2 * r.pairs.len() + r.unmatched.len(), width);
    }

    #[test]
    fn error_correlation_matrix_is_well_formed(seed in 0u64..1000) {
        let shape = NetworkShape::new(1, vec![16], 1).unwrap();
        let p = random_net(&shape, seed, 1.0);
        let all: Vec<usize> = (0..16).collect();
        let pairing = match_symmetric_pairs(&p, &all, 2.0, MatchingStrategy::Greedy).unwrap();
        let e = regressor_errors_and_correlation(&p, &pairing, &uniform_grid(-1.0, 1.0, 128), &|x| x * x).unwrap();
        let n = e.correlation.len();
        for i in 0..n {
            prop_assert!((e.correlation[i][i] - 1.0).abs() < 1e-12);
            for j in 0..n {
                let r = e.correlation[i][j];
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((r - e.correlation[j][i]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn closed_form_allocation_matches_bruteforce_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..50 {
        let k = 2 + case % 2;
        let steps = if k == 2 { 100_000 } else { 1000 };
        let a: Vec<f64> = (0..k).map(|_| rand::Rng::random_range(&mut rng, 0.1..10.0)).collect();
        let c: Vec<f64> = (0..k).map(|_| rand::Rng::random_range(&mut rng, 0.5..4.0)).collect();
        let budget = rand::Rng::random_range(&mut rng, 5.0..500.0);
        let p = AllocationProblem::new(a, c.clone(), budget).unwrap();
        let exact = solve_allocation(&p).unwrap();
        let grid = solve_allocation_bruteforce(&p, steps).unwrap();
        assert!(grid.loss >= exact.loss * (1.0 - 1e-12));
        for (i, ci) in c.iter().enumerate() {
            // grid spacing in subtask i's units is budget/(c_i·steps)
            let h = budget / (ci * steps as f64);
            assert!(
                (grid.allocations[i] - exact.allocations[i]).abs() <= 3.0 * h,
                "case {case} subtask {i}: {} vs {}",
                grid.allocations[i],
                exact.allocations[i]
            );
        }
    }
}

#[test]
fn equal_weight_uncorrelated_ensemble_scales_exactly() {
    for n in 1..=64 {
        let spec = EnsembleSpec {
            n,
            error_variance: 0.01,
            correlation: 0.0,
        };
        let mse = ensemble_mse(&spec, None).unwrap();
        assert_eq!(mse * n as f64, 0.01, "n = {n}");
    }
}

#[test]
fn trained_style_pairs_share_error_shape() {
    // a mirrored pair family approximating x²: all pairs share the same
    // relative geometry, so their error shapes coincide
    let widths = [0.8, 1.1, 1.6];
    let mut w = Vec::new();
    let mut b = Vec::new();
    for &s in &widths {
        w.extend([s, -s]);
        b.extend([0.3 * s, 0.3 * s]);
    }
    let n = w.len();
    let shape = NetworkShape::new(1, vec![n], 1).unwrap();
    let mut p = NetworkParams::zeros(&shape).unwrap();
    p.layers_mut()[0].weights = Array2::from_shape_vec((1, n), w).unwrap();
    p.layers_mut()[0].biases = ndarray::Array1::from(b);
    p.layers_mut()[1].weights.fill(1.0);
    let all: Vec<usize> = (0..n).collect();
    let pairing = match_symmetric_pairs(
        &p,
        &all,
        allocometer::DEFAULT_PAIR_DISTANCE_CAP,
        MatchingStrategy::Greedy,
    )
    .unwrap();
    assert_eq!(pairing.pairs.len(), 3);
    let e = regressor_errors_and_correlation(&p, &pairing, &uniform_grid(-1.0, 1.0, 512), &|x| x * x).unwrap();
    assert!(e.fraction_above(0.9) > 0.99);
}
