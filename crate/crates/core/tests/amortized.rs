use bvsmooth::amortized::{
    gated_update, mc_elbo_nonlinear, mc_elbo_parts, AmortizedModel, Architecture, GateParams,
    Layer, McNoise, Mlp, UpdateMode, VariationalDynamics,
};
use bvsmooth::experiments::nonlinear::{
    evaluation_sequences, train_amortized, training_sequences, DecoderKind, EmissionConfig,
    NonlinearConfig,
};
use bvsmooth::experiments::OptimConfig;
use bvsmooth::gauss::Gaussian;
use bvsmooth::kalman::{kalman_filter, kalman_smoother};
use bvsmooth::linalg::Matrix;
use bvsmooth::rng::stream_rng;
use bvsmooth::ssm::{simulate_lg, LGParams, NonlinearEmission};
use bvsmooth::variational::{elbo_of_family, expected_emission_loglik};

fn scalar_layer(weights: &[f64], bias: &[f64]) -> Layer {
    Layer {
        weights: Matrix::from_vec(weights.len(), 1, weights.to_vec()).unwrap(),
        bias: bias.to_vec(),
    }
}

fn linear_emission(weight: f64, noise_var: f64) -> EmissionConfig {
    EmissionConfig {
        kind: DecoderKind::Linear,
        decoder: Mlp {
            layers: vec![scalar_layer(&[weight], &[0.0])],
        },
        noise_var,
    }
}

/// Encoder returning exactly the Gaussian likelihood factor of `y = b x + N(0, r)`.
fn exact_encoder_model(theta: &LGParams) -> AmortizedModel {
    let (b, r) = (theta.b[(0, 0)], theta.r[(0, 0)]);
    // eta2 = -½·precision
    let half_precision: f64 = 0.5 * b * b / r;
    let raw = half_precision.exp_m1().ln(); // softplus⁻¹
    AmortizedModel {
        arch: Architecture::new(UpdateMode::Johnson, 1, 1, &[], false),
        dynamics: VariationalDynamics::from_lg(theta),
        net: Mlp {
            layers: vec![scalar_layer(&[b / r, 0.0], &[0.0, raw])],
        },
        gate: None,
    }
}

#[test]
fn exact_encoder_reproduces_kalman_filter() {
    let theta = LGParams::scalar(0.2, 1.5, 0.8, 0.3, 1.3, 0.4);
    let ys = simulate_lg(&theta, 60, 4).unwrap().observations;
    let run = exact_encoder_model(&theta).run(&ys).unwrap();
    let fs = kalman_filter(&theta, &ys).unwrap();
    for k in 0..ys.len() {
        assert!((run.filters[k].mean[0] - fs.filters[k].mean[0]).abs() < 1e-10);
        assert!((run.filters[k].cov[(0, 0)] - fs.filters[k].cov[(0, 0)]).abs() < 1e-10);
        assert!((run.predictives[k].mean[0] - fs.predictives[k].mean[0]).abs() < 1e-10);
    }
    let elbo = elbo_of_family(&theta, &run.family, &ys).unwrap();
    assert!((elbo - fs.loglik).abs() < 1e-8 * fs.loglik.abs().max(1.0));
}

#[test]
fn saturated_gate_collapses_to_prior_dynamics() {
    let dynamics = VariationalDynamics::from_lg(&LGParams::scalar(0.5, 2.0, 0.7, 0.2, 1.0, 1.0));
    let arch = Architecture::new(UpdateMode::Gated, 1, 1, &[4], true);
    let mut model = AmortizedModel::init(arch, dynamics.clone(), &mut stream_rng(3, 0)).unwrap();
    let gate = model.gate.as_mut().unwrap();
    gate.weights = Matrix::zeros(gate.weights.rows(), gate.weights.cols());
    gate.bias = vec![60.0; gate.bias.len()];
    let ys: Vec<Vec<f64>> = (0..30).map(|k| vec![(k as f64).sin() * 3.0]).collect();
    let run = model.run(&ys).unwrap();
    let (mut mean, mut var) = (0.5, 2.0);
    for k in 0..ys.len() {
        if k > 0 {
            mean *= 0.7;
            var = 0.49 * var + 0.2;
        }
        assert!((run.filters[k].mean[0] - mean).abs() < 1e-12);
        assert!((run.filters[k].cov[(0, 0)] - var).abs() < 1e-12);
    }
}

#[test]
fn gated_update_mixes_in_parameter_space() {
    let net = Mlp::init(&[3, 5, 2], &mut stream_rng(8, 0)).unwrap();
    let gate = GateParams {
        weights: Matrix::from_rows(&[&[0.3, -0.2, 0.5], &[0.1, 0.4, -0.3]]),
        bias: vec![0.2, -0.1],
    };
    let u = Gaussian::new(vec![0.4], Matrix::from_rows(&[&[0.8]])).unwrap();
    let y = [1.2];
    let got = gated_update(&u, &y, &net, Some(&gate)).unwrap();

    // hand evaluation with features (mean, log sd, y)
    let features = [0.4, 0.5 * 0.8f64.ln(), 1.2];
    let proposal = net.forward(&features).unwrap();
    let gate_out: Vec<f64> = (0..2)
        .map(|i| {
            let z: f64 = (0..3)
                .map(|j| gate.weights[(i, j)] * features[j])
                .sum::<f64>()
                + gate.bias[i];
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    let mixed: Vec<f64> = (0..2)
        .map(|i| gate_out[i] * features[i] + (1.0 - gate_out[i]) * proposal[i])
        .collect();
    assert!((got.mean[0] - mixed[0]).abs() < 1e-12);
    assert!((got.cov[(0, 0)] - (2.0 * mixed[1]).exp()).abs() < 1e-12);
}

#[test]
fn zero_decoder_gives_constant_emission_mean() {
    let emission = NonlinearEmission {
        decoder: Mlp::zeros(&[1, 1]),
        output_tanh: true,
        apply_cos: true,
        r: Matrix::identity(1),
    };
    for x in [-3.0, 0.0, 0.7, 12.0] {
        assert_eq!(emission.mean_f64(&[x]).unwrap(), vec![1.0]);
    }
}

#[test]
fn linear_decoder_mc_elbo_matches_closed_form() {
    let cfg = NonlinearConfig {
        emission: linear_emission(0.8, 0.3),
        hidden: vec![6],
        ..NonlinearConfig::default()
    };
    let emission = cfg.emission.emission().unwrap();
    let theta = cfg.emission.exact_model(&cfg.dynamics).unwrap().unwrap();
    let ys = simulate_lg(&theta, 20, 6).unwrap().observations;
    let model = AmortizedModel::init(
        cfg.architecture(UpdateMode::Johnson),
        VariationalDynamics::from_lg(&cfg.dynamics),
        &mut stream_rng(6, 1),
    )
    .unwrap();
    let q = model.run(&ys).unwrap().family;
    let closed = elbo_of_family(&theta, &q, &ys).unwrap();

    // the non-sampled part is exact; only the emission terms are estimated
    let noise = McNoise::draw(ys.len(), 1, 4, 6, 0).unwrap();
    let (fixed, _) =
        mc_elbo_parts(&cfg.dynamics, &emission, &emission.decoder, &q, &ys, &noise).unwrap();
    let sm = q.smoothed().unwrap();
    let emission_exact: f64 = ys
        .iter()
        .zip(&sm.marginals)
        .map(|(y, m)| expected_emission_loglik(&theta.b, &theta.r, y, m).unwrap())
        .sum();
    assert!((fixed + emission_exact - closed).abs() < 1e-9 * closed.abs().max(1.0));

    let reps = 200;
    let estimates: Vec<f64> = (0..reps)
        .map(|r| {
            let noise = McNoise::draw(ys.len(), 1, 8, 6, 100 + r).unwrap();
            mc_elbo_nonlinear(&cfg.dynamics, &emission, &emission.decoder, &q, &ys, &noise).unwrap()
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / reps as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let se = (var / reps as f64).sqrt();
    assert!(
        (mean - closed).abs() < 4.0 * se,
        "{mean} vs {closed} (se {se})"
    );
}

#[test]
fn doubling_samples_halves_estimator_variance() {
    let cfg = NonlinearConfig::default();
    let emission = cfg.emission.emission().unwrap();
    let ys = bvsmooth::ssm::simulate_nonlinear(&cfg.dynamics, &emission, 15, 2)
        .unwrap()
        .observations;
    let model = AmortizedModel::init(
        cfg.architecture(UpdateMode::Gated),
        VariationalDynamics::from_lg(&cfg.dynamics),
        &mut stream_rng(2, 1),
    )
    .unwrap();
    let q = model.run(&ys).unwrap().family;
    let variance = |samples: usize, stream: u64| {
        let est: Vec<f64> = (0..200)
            .map(|r| {
                let noise = McNoise::draw(ys.len(), 1, samples, 2, stream + r).unwrap();
                mc_elbo_nonlinear(&cfg.dynamics, &emission, &emission.decoder, &q, &ys, &noise)
                    .unwrap()
            })
            .collect();
        let m = est.iter().sum::<f64>() / est.len() as f64;
        est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (est.len() - 1) as f64
    };
    let ratio = variance(4, 1000) / variance(8, 5000);
    // F(199, 199) ratio of sample variances: 2 ± ~0.6 at three standard deviations
    assert!(ratio > 1.4 && ratio < 2.9, "ratio {ratio}");
}

#[test]
fn trained_models_recover_exact_smoother_with_linear_decoder() {
    let cfg = NonlinearConfig {
        emission: linear_emission(1.0, 0.5),
        hidden: vec![8, 8],
        train_sequences: 8,
        n_train: 100,
        epochs: 30,
        optimizer: OptimConfig::with_lr(1e-2),
        eval_sequences: 1,
        n_eval: 100,
        eval_prefixes: vec![100],
        ..NonlinearConfig::default()
    };
    let theta = cfg.emission.exact_model(&cfg.dynamics).unwrap().unwrap();
    let data = training_sequences(&cfg, 0).unwrap();
    let eval = &evaluation_sequences(&cfg, 0).unwrap()[0];
    let (_, exact) = kalman_smoother(&theta, &eval.observations).unwrap();
    for mode in [UpdateMode::Johnson, UpdateMode::Gated] {
        let trained = train_amortized(&cfg, mode, &data, 0).unwrap();
        let sm = trained
            .saved
            .model()
            .unwrap()
            .run(&eval.observations)
            .unwrap()
            .family
            .smoothed()
            .unwrap();
        let mse = sm
            .marginals
            .iter()
            .zip(&exact.marginals)
            .map(|(a, b)| (a.mean[0] - b.mean[0]).powi(2))
            .sum::<f64>()
            / sm.marginals.len() as f64;
        assert!(mse.sqrt() < 0.05, "{mode:?}: per-step RMS {}", mse.sqrt());
    }
}
