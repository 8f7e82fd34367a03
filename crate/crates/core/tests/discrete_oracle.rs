use bvsmooth::discrete::{
    dhmm_bound_check, dhmm_ck, dhmm_filter_smooth, fitted_slope, growth_sweep, jitter_family,
    make_functional, random_hmm, rho_hats, verify_instance, DiscreteBackwardVariational,
    FunctionalKind, GridSpec, RhoChoice,
};
use proptest::prelude::*;

mod common;
use common::{enumerate_paths, enumerated_expectation, enumerated_loglik};

#[test]
fn smoothing_matches_path_enumeration() {
    for (id, (s, n)) in [(2, 1), (2, 7), (3, 6), (3, 7), (3, 3)]
        .into_iter()
        .enumerate()
    {
        let hmm = random_hmm(s, 3, n, 21, id as u64).unwrap().model;
        let ex = dhmm_filter_smooth(&hmm).unwrap();
        let paths = enumerate_paths(&hmm);
        for k in 0..=n {
            for x in 0..s {
                let p: f64 = paths
                    .iter()
                    .filter(|(p, _)| p[k] == x)
                    .map(|(_, w)| w)
                    .sum();
                assert!((p - ex.smoothed.marginals[k][x]).abs() < 1e-10);
            }
        }
        for kind in [FunctionalKind::StateSum, FunctionalKind::RandomTables] {
            let f = make_functional(kind, s, n, 3, id as u64);
            let exact = f.expect(&ex.smoothed).unwrap();
            assert!((exact - enumerated_expectation(&hmm, &f)).abs() < 1e-10);
        }
        assert!((ex.loglik - enumerated_loglik(&hmm)).abs() < 1e-10);
    }
}

#[test]
fn variational_expectation_matches_enumeration() {
    let hmm = random_hmm(3, 2, 5, 8, 0).unwrap().model;
    let ex = dhmm_filter_smooth(&hmm).unwrap();
    let q = jitter_family(&ex.backward, 3.0, 8, 1).unwrap();
    let f = make_functional(FunctionalKind::RandomTables, 3, 5, 8, 2);
    // path probability under the backward factorization
    let mut want = 0.0;
    for code in 0..3usize.pow(6) {
        let path: Vec<usize> = (0..6).map(|k| code / 3usize.pow(k) % 3).collect();
        let mut w = q.terminal[path[5]];
        for k in 1..=5 {
            w *= q.kernels[k - 1][path[k]][path[k - 1]];
        }
        want += w
            * (0..5)
                .map(|k| f.tables[k][path[k]][path[k + 1]])
                .sum::<f64>();
    }
    assert!((f.expect(&q.smoothed()).unwrap() - want).abs() < 1e-12);
}

#[test]
fn randomized_bound_holds_on_default_grid() {
    for functional in [FunctionalKind::StateSum, FunctionalKind::RandomTables] {
        for rho in [RhoChoice::TrueFilters, RhoChoice::VariationalMarginals] {
            let grid = GridSpec {
                functional,
                rho,
                ..GridSpec::default()
            };
            for (id, spec) in grid.instances(2024).unwrap().iter().enumerate() {
                let row = verify_instance(id, spec, 2024).unwrap();
                assert!(row.holds, "{row:?}");
                assert!(row.rho >= 0.0 && row.rho < 1.0);
            }
        }
    }
}

#[test]
fn unperturbed_grid_has_zero_error() {
    let grid = GridSpec {
        instances: 20,
        kappas: vec![f64::INFINITY],
        ..GridSpec::default()
    };
    for (id, spec) in grid.instances(5).unwrap().iter().enumerate() {
        let row = verify_instance(id, spec, 5).unwrap();
        assert!(row.lhs < 1e-12 && row.holds, "{row:?}");
    }
}

#[test]
fn error_grows_at_most_linearly() {
    let hmm = random_hmm(3, 3, 200, 77, 0).unwrap().model;
    let ns: Vec<usize> = (1..=20).map(|i| i * 10).collect();
    let pts = growth_sweep(&hmm, 50.0, &ns, 5, 77).unwrap();
    let mut marginal_max: f64 = 0.0;
    for p in &pts {
        assert!(
            p.lhs <= p.rhs + 1e-10 && p.rhs <= p.linear_bound + 1e-9,
            "{p:?}"
        );
        assert!(p.marginal_lhs <= p.marginal_bound + 1e-10, "{p:?}");
        marginal_max = marginal_max.max(p.marginal_lhs);
    }
    let x: Vec<f64> = pts.iter().map(|p| p.n as f64).collect();
    let lhs: Vec<f64> = pts.iter().map(|p| p.lhs).collect();
    let rhs: Vec<f64> = pts.iter().map(|p| p.rhs).collect();
    let slope = fitted_slope(&x, &lhs);
    assert!(slope > 0.0 && slope <= fitted_slope(&x, &rhs));
    // the single-step error does not accumulate with the horizon
    assert!(marginal_max < 10.0 * pts[0].marginal_lhs.max(1e-3));
}

#[test]
fn constants_shrink_with_the_perturbation() {
    let hmm = random_hmm(3, 3, 12, 3, 0).unwrap().model;
    let ex = dhmm_filter_smooth(&hmm).unwrap();
    let uniform = vec![vec![1.0 / 3.0; 3]; 3];
    let mut last = f64::INFINITY;
    for eps in [0.5, 0.25, 0.1, 0.05, 0.01, 0.001, 0.0] {
        let kernels = ex
            .backward
            .kernels
            .iter()
            .map(|t| {
                t.iter()
                    .zip(&uniform)
                    .map(|(r, u)| {
                        r.iter()
                            .zip(u)
                            .map(|(a, b)| (1.0 - eps) * a + eps * b)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let q = DiscreteBackwardVariational {
            terminal: ex.backward.terminal.clone(),
            kernels,
        };
        let rho = rho_hats(&q, &ex, RhoChoice::TrueFilters);
        let total: f64 = dhmm_ck(&hmm, &q, &rho).unwrap().iter().sum();
        assert!(total <= last + 1e-15, "eps {eps}: {total} > {last}");
        last = total;
    }
    assert!(last < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bound_holds_for_arbitrary_perturbations(
        s in 2usize..=4,
        n in 1usize..=12,
        log_kappa in -1.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let hmm = random_hmm(s, 3, n, seed, 0).unwrap().model;
        let ex = dhmm_filter_smooth(&hmm).unwrap();
        let q = jitter_family(&ex.backward, 10f64.powf(log_kappa), seed, 1).unwrap();
        let f = make_functional(FunctionalKind::RandomTables, s, n, seed, 2);
        for choice in [RhoChoice::TrueFilters, RhoChoice::VariationalMarginals] {
            let rho = rho_hats(&q, &ex, choice);
            let check = dhmm_bound_check(&hmm, &q, &rho, &f).unwrap();
            prop_assert!(check.holds, "{:?}", check);
            prop_assert!(check.ck.iter().all(|c| (0.0..=2.0 + 1e-12).contains(c)));
        }
    }

    #[test]
    fn smoothed_marginals_are_distributions(s in 2usize..=4, n in 1usize..=20, seed in any::<u64>()) {
        let hmm = random_hmm(s, 2, n, seed, 0).unwrap().model;
        let ex = dhmm_filter_smooth(&hmm).unwrap();
        for m in &ex.smoothed.marginals {
            prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (k, pair) in ex.smoothed.pairs.iter().enumerate() {
            for x in 0..s {
                let row: f64 = pair[x].iter().sum();
                prop_assert!((row - ex.smoothed.marginals[k][x]).abs() < 1e-12);
            }
        }
    }
}
