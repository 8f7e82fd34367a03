use bvsmooth::amortized::{
    mc_elbo_nonlinear, AmortizedModel, McNoise, UpdateMode, VariationalDynamics,
};
use bvsmooth::autodiff::finite_difference_grad;
use bvsmooth::experiments::linear::elbo_and_grad;
use bvsmooth::experiments::nonlinear::{amortized_elbo_and_grad, NonlinearConfig};
use bvsmooth::rng::stream_rng;
use bvsmooth::ssm::{simulate_nonlinear, LGParams};
use bvsmooth::variational::elbo_closed_form;

mod common;
use common::{random_lg, random_obs};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// `|a − f| / max(|f|, 1)`, worst coordinate.
fn worst_rel(ad: &[f64], fd: &[f64]) -> f64 {
    ad.iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn linear_elbo_gradient_matches_finite_differences() {
    let mut rng = stream_rng(201, 0);
    for (d, m, n) in [(1, 1, 20), (2, 1, 12), (2, 2, 8)] {
        let theta = random_lg(d, m, &mut rng);
        let lambda = random_lg(d, m, &mut rng);
        let ys = random_obs(m, n, &mut rng);
        let layout = lambda.to_params().unwrap();
        let (value, grad) = elbo_and_grad(&theta, &layout, &layout.values, &ys).unwrap();
        assert_eq!(grad.len(), layout.len());
        assert!((value - elbo_closed_form(&theta, &lambda, &ys).unwrap()).abs() < 1e-9);
        let fd = finite_difference_grad(&layout.values, STEP, |x| {
            elbo_closed_form(&theta, &LGParams::from_params(&layout, x)?, &ys)
        })
        .unwrap();
        let err = worst_rel(&grad, &fd);
        assert!(err <= TOL, "d={d} m={m}: {err:e}");
    }
}

#[test]
fn amortized_mc_elbo_gradient_matches_finite_differences() {
    let mut cfg = NonlinearConfig::default();
    cfg.hidden = vec![8, 8];
    let emission = cfg.emission.emission().unwrap();
    let ys = simulate_nonlinear(&cfg.dynamics, &emission, 7, 5)
        .unwrap()
        .observations;
    let noise = McNoise::draw(ys.len(), 1, 4, 5, 9).unwrap();
    for mode in [UpdateMode::Johnson, UpdateMode::Gated] {
        let arch = cfg.architecture(mode);
        let model = AmortizedModel::init(
            arch.clone(),
            VariationalDynamics::from_lg(&cfg.dynamics),
            &mut stream_rng(5, 1),
        )
        .unwrap();
        let layout = model.to_params().unwrap();
        let (_, grad) =
            amortized_elbo_and_grad(&cfg, &emission, &arch, &layout, &layout.values, &ys, &noise)
                .unwrap();
        let fd = finite_difference_grad(&layout.values, STEP, |x| {
            let m = AmortizedModel::from_params(&arch, &layout, x)?;
            let run = m.run(&ys)?;
            mc_elbo_nonlinear(
                &cfg.dynamics,
                &emission,
                &emission.decoder,
                &run.family,
                &ys,
                &noise,
            )
        })
        .unwrap();
        let err = worst_rel(&grad, &fd);
        assert!(err <= TOL, "{mode:?}: {err:e}");
    }
}
