use bvsmooth::ffbsi::{
    batch_mean, bootstrap_filter, ffbsi, ffbsi_additive, ffbsi_replicates, LinearGaussianModel,
};
use bvsmooth::kalman::{kalman_smoother, smoothed_additive};
use bvsmooth::rng::substream;
use bvsmooth::ssm::{simulate_lg, AdditiveFunctional, LGParams};

const REPLICATES: usize = 16;

fn setup() -> (LGParams, Vec<Vec<f64>>) {
    let p = LGParams::scalar(0.0, 1.0, 0.9, 0.1, 1.0, 0.5);
    let traj = simulate_lg(&p, 100, 11).unwrap();
    (p, traj.observations)
}

#[test]
fn particle_filter_tracks_kalman_filter() {
    let (p, ys) = setup();
    let model = LinearGaussianModel::new(&p).unwrap();
    let (fs, _) = kalman_smoother(&p, &ys).unwrap();
    let runs: Vec<_> = (0..REPLICATES as u64)
        .map(|r| bootstrap_filter(&model, &ys, 2000, substream(5, r)).unwrap())
        .collect();
    let per_run: Vec<Vec<f64>> = runs
        .iter()
        .map(|pf| pf.sets.iter().map(|s| s.mean()[0]).collect())
        .collect();
    let (mean, se) = batch_mean(&per_run).unwrap();
    for k in 0..=100 {
        let exact = fs.filters[k].mean[0];
        assert!(
            (mean[k] - exact).abs() < 4.0 * se[k],
            "k={k}: {} vs {exact} (se {})",
            mean[k],
            se[k]
        );
    }
    let lls: Vec<Vec<f64>> = runs.iter().map(|pf| vec![pf.loglik]).collect();
    let (ll, ll_se) = batch_mean(&lls).unwrap();
    assert!(
        (ll[0] - fs.loglik).abs() < 4.0 * ll_se[0],
        "{} vs {}",
        ll[0],
        fs.loglik
    );
}

#[test]
fn backward_simulation_matches_kalman_smoother() {
    let (p, ys) = setup();
    let model = LinearGaussianModel::new(&p).unwrap();
    let (_, sm) = kalman_smoother(&p, &ys).unwrap();
    let reps = ffbsi_replicates(&model, &ys, 2000, 1000 / REPLICATES, REPLICATES, 6).unwrap();
    let per_rep: Vec<Vec<f64>> = reps
        .iter()
        .map(|s| s.marginal_means().into_iter().map(|m| m[0]).collect())
        .collect();
    let (mean, se) = batch_mean(&per_rep).unwrap();
    for k in 0..=100 {
        let exact = sm.marginals[k].mean[0];
        assert!(
            (mean[k] - exact).abs() < 4.0 * se[k],
            "k={k}: {} vs {exact} (se {})",
            mean[k],
            se[k]
        );
    }

    let f = AdditiveFunctional::state_sum(1);
    let sums: Vec<Vec<f64>> = reps
        .iter()
        .map(|s| ffbsi_additive(s, &f).unwrap().0)
        .collect();
    let (est, se) = batch_mean(&sums).unwrap();
    let exact = smoothed_additive(&sm, &f).unwrap();
    assert!(
        (est[0] - exact[0]).abs() < 4.0 * se[0],
        "{} vs {} (se {})",
        est[0],
        exact[0],
        se[0]
    );
}

#[test]
fn single_run_backward_simulation_is_close() {
    let (p, ys) = setup();
    let model = LinearGaussianModel::new(&p).unwrap();
    let pf = bootstrap_filter(&model, &ys, 2000, 5).unwrap();
    let sample = ffbsi(&model, &pf, 1000, 6).unwrap();
    let (_, sm) = kalman_smoother(&p, &ys).unwrap();
    let means = sample.marginal_means();
    let vars = sample.marginal_variances();
    for k in 0..=100 {
        assert!((means[k][0] - sm.marginals[k].mean[0]).abs() < 0.1);
        assert!((vars[k][0] - sm.marginals[k].cov[(0, 0)]).abs() < 0.05);
    }
}
