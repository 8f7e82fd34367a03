//! Training the linear-Gaussian variational family against a known model and
//! measuring additive smoothing error at successive stopping points.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    pearson, trailing_average, ExperimentConfig, ExperimentKind, OptimConfig, Outputs, RunRecord,
    TrainingFailure,
};
use crate::autodiff::value_and_grad;
use crate::error::{Error, Result};
use crate::kalman::{kalman_smoother, smoothed_additive};
use crate::optim::{clip_grad_norm, Checkpoint, ParamVector};
use crate::rng::{stream_rng, substream};
use crate::ssm::{simulate_lg_stream, AdditiveFunctional, LGParams, Trajectory};
use crate::variational::{elbo_closed_form, variational_smoothed_additive, BackwardVariational};

/// Stream labels for the independent random inputs of a linear run.
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

/// Starting point of the variational parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaInit {
    Theta,
    /// θ's unconstrained coordinates plus independent `U(-scale, scale)` offsets.
    Perturbed {
        scale: f64,
    },
    Explicit {
        params: LGParams,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    pub theta: LGParams,
    pub lambda_init: LambdaInit,
    /// Index of the last observation in each training sequence.
    pub n_train: usize,
    pub train_sequences: usize,
    pub epochs: usize,
    pub stopping_epochs: Vec<usize>,
    pub optimizer: OptimConfig,
    /// `J`, the number of evaluation sequences.
    pub eval_sequences: usize,
    pub n_eval: usize,
    pub eval_prefixes: Vec<usize>,
    /// How many evaluation sequences get per-step marginal errors written.
    pub marginal_error_sequences: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            theta: LGParams::scalar(0.0, 1.0, 0.9, 0.1, 1.0, 0.5),
            lambda_init: LambdaInit::Perturbed { scale: 0.5 },
            n_train: 64,
            train_sequences: 10,
            epochs: 100,
            stopping_epochs: vec![60, 80, 100],
            optimizer: OptimConfig::with_lr(1e-2),
            eval_sequences: 20,
            n_eval: 2000,
            eval_prefixes: vec![125, 250, 500, 1000, 2000],
            marginal_error_sequences: 1,
        }
    }
}

impl LinearConfig {
    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        self.optimizer.validate()?;
        if self.n_train < 1
            || self.train_sequences < 1
            || self.eval_sequences < 1
            || self.n_eval < 1
        {
            return Err(Error::InvalidConfig(
                "counts and lengths must be >= 1".into(),
            ));
        }
        if self.stopping_epochs.iter().any(|&e| e > self.epochs) {
            return Err(Error::InvalidConfig(
                "stopping epoch beyond the last epoch".into(),
            ));
        }
        if self.eval_prefixes.is_empty()
            || self.eval_prefixes.iter().any(|&n| n < 1 || n > self.n_eval)
        {
            return Err(Error::InvalidConfig(format!(
                "eval prefixes must lie in 1..={}",
                self.n_eval
            )));
        }
        match &self.lambda_init {
            LambdaInit::Perturbed { scale } if !(*scale >= 0.0) => Err(Error::InvalidConfig(
                "perturbation scale must be >= 0".into(),
            )),
            LambdaInit::Explicit { params } => {
                params.validate()?;
                if params.state_dim() != self.theta.state_dim()
                    || params.obs_dim() != self.theta.obs_dim()
                {
                    return Err(Error::InvalidConfig(
                        "initial lambda has the wrong shape".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub elbo: f64,
    pub loglik: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveErrorRow {
    pub checkpoint_epoch: usize,
    pub sequence_id: usize,
    pub n: usize,
    pub abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalErrorRow {
    pub checkpoint_epoch: usize,
    pub sequence_id: usize,
    pub k: usize,
    pub abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceErrorRow {
    pub sequence_id: usize,
    pub mean_err_ref: f64,
    pub var_err_ref: f64,
}

/// Everything a linear run computes, before anything is written.
#[derive(Clone, Debug)]
pub struct LinearResults {
    pub curve: Vec<CurveRow>,
    pub checkpoints: Vec<(usize, Checkpoint)>,
    pub additive_errors: Vec<AdditiveErrorRow>,
    pub marginal_errors: Vec<MarginalErrorRow>,
    pub reference_errors: Vec<ReferenceErrorRow>,
}

/// Property checks on a finished run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearSummary {
    /// Largest drop of the 10-epoch trailing ELBO average.
    pub worst_trailing_drop: f64,
    /// Largest `elbo − loglik` over all epochs (should be ≤ 0).
    pub worst_elbo_excess: f64,
    /// Sequences whose final-length error strictly decreases across stops.
    pub monotone_sequences: usize,
    pub sequences: usize,
    /// Per stopping epoch: Pearson correlation of mean error with `n`.
    pub pearson: Vec<(usize, f64)>,
}

pub fn initial_lambda(cfg: &LinearConfig, seed: u64) -> Result<LGParams> {
    match &cfg.lambda_init {
        LambdaInit::Theta => Ok(cfg.theta.clone()),
        LambdaInit::Explicit { params } => Ok(params.clone()),
        LambdaInit::Perturbed { scale } => {
            let mut pv = cfg.theta.to_params()?;
            let mut rng = stream_rng(seed, INIT_STREAM);
            for v in pv.values.iter_mut() {
                *v += scale * rng.random_range(-1.0..=1.0);
            }
            LGParams::from_params(&pv, &pv.values)
        }
    }
}

pub fn training_sequences(cfg: &LinearConfig, seed: u64) -> Result<Vec<Trajectory>> {
    (0..cfg.train_sequences)
        .map(|i| {
            simulate_lg_stream(
                &cfg.theta,
                cfg.n_train,
                seed,
                substream(TRAIN_STREAM, i as u64),
            )
        })
        .collect()
}

pub fn evaluation_sequences(cfg: &LinearConfig, seed: u64) -> Result<Vec<Trajectory>> {
    (0..cfg.eval_sequences)
        .map(|j| {
            simulate_lg_stream(
                &cfg.theta,
                cfg.n_eval,
                seed,
                substream(EVAL_STREAM, j as u64),
            )
        })
        .collect()
}

/// Closed-form ELBO and its gradient in the flat coordinates of `layout`.
pub fn elbo_and_grad(
    theta: &LGParams,
    layout: &ParamVector,
    values: &[f64],
    ys: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    value_and_grad(values, |vars| {
        let lambda = LGParams::from_params(layout, vars)?;
        elbo_closed_form(&theta.lift(), &lambda, ys)
    })
}

fn mean_elbo(theta: &LGParams, lambda: &LGParams, data: &[Trajectory]) -> Result<f64> {
    let mut total = 0.0;
    for t in data {
        total += elbo_closed_form(theta, lambda, &t.observations)?;
    }
    Ok(total / data.len() as f64)
}

pub type Trained = (Vec<CurveRow>, Vec<(usize, Checkpoint)>);

/// Adam over the training sequences, one full-sequence step per sequence
/// per epoch. The returned checkpoints hold the state at each stopping epoch.
pub fn train_linear(
    cfg: &LinearConfig,
    seed: u64,
) -> std::result::Result<Trained, TrainingFailure> {
    cfg.validate()?;
    let data = training_sequences(cfg, seed)?;
    let mut loglik = 0.0;
    for t in &data {
        loglik += kalman_smoother(&cfg.theta, &t.observations)?.0.loglik;
    }
    loglik /= data.len() as f64;

    let mut params = initial_lambda(cfg, seed)?.to_params()?;
    let mut opt = cfg.optimizer.state(params.len());
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let mut checkpoints = Vec::new();
    let stop_at = |e: usize| cfg.stopping_epochs.contains(&e);

    let lambda = LGParams::from_params(&params, &params.values)?;
    curve.push(CurveRow {
        epoch: 0,
        elbo: mean_elbo(&cfg.theta, &lambda, &data)?,
        loglik,
    });
    if stop_at(0) {
        checkpoints.push((0, Checkpoint::new(&params, &opt)));
    }
    for epoch in 1..=cfg.epochs {
        for t in &data {
            let before = opt.clone();
            let step = elbo_and_grad(&cfg.theta, &params, &params.values, &t.observations)
                .and_then(|(_, mut g)| {
                    if let Some(c) = cfg.optimizer.clip_norm {
                        clip_grad_norm(&mut g, c);
                    }
                    let mut next = params.values.clone();
                    opt.step(&mut next, &g)?;
                    LGParams::from_params(&params, &next)?.validate()?;
                    Ok(next)
                });
            match step {
                Ok(next) => params.values = next,
                Err(source) => {
                    return Err(TrainingFailure {
                        epoch,
                        last_good: Some(Checkpoint::new(&params, &before)),
                        source,
                    })
                }
            }
        }
        let lambda = LGParams::from_params(&params, &params.values)?;
        curve.push(CurveRow {
            epoch,
            elbo: mean_elbo(&cfg.theta, &lambda, &data)?,
            loglik,
        });
        if stop_at(epoch) {
            checkpoints.push((epoch, Checkpoint::new(&params, &opt)));
        }
    }
    Ok((curve, checkpoints))
}

/// `|E_q h − E_φ h|` for the state-sum functional on each prefix `y_{0:n}`.
pub fn additive_error_prefixes(
    theta: &LGParams,
    lambda: &LGParams,
    ys: &[Vec<f64>],
    prefixes: &[usize],
) -> Result<Vec<f64>> {
    let f = AdditiveFunctional::state_sum(theta.state_dim());
    prefixes
        .iter()
        .map(|&n| {
            let prefix = &ys[..=n];
            let (_, sm) = kalman_smoother(theta, prefix)?;
            let exact = smoothed_additive(&sm, &f)?;
            let (q, _) = BackwardVariational::from_lg_model(lambda, prefix)?;
            let approx = variational_smoothed_additive(&q, &f)?;
            Ok(exact.iter().zip(&approx).map(|(a, b)| (a - b).abs()).sum())
        })
        .collect()
}

/// `|E_q x_k − E_φ x_k|` (summed over coordinates) for every `k`.
pub fn marginal_errors(theta: &LGParams, lambda: &LGParams, ys: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (_, sm) = kalman_smoother(theta, ys)?;
    let (q, _) = BackwardVariational::from_lg_model(lambda, ys)?;
    let qs = q.smoothed()?;
    Ok(sm
        .marginals
        .iter()
        .zip(&qs.marginals)
        .map(|(a, b)| a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).abs()).sum())
        .collect())
}

/// Mean and variance over `k` of `‖x̂_k − x*_k‖²` with `x̂` the smoothed mean.
pub fn reference_error(smoothed_means: &[Vec<f64>], states: &[Vec<f64>]) -> (f64, f64) {
    let sq: Vec<f64> = smoothed_means
        .iter()
        .zip(states)
        .map(|(m, x)| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let n = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub fn linear_experiment(cfg: &LinearConfig, seed: u64) -> Result<LinearResults> {
    let trained = train_linear(cfg, seed)?;
    evaluate_linear(cfg, seed, trained)
}

/// Errors of each stopping-epoch family on the evaluation sequences.
pub fn evaluate_linear(
    cfg: &LinearConfig,
    seed: u64,
    (curve, checkpoints): Trained,
) -> Result<LinearResults> {
    let eval = evaluation_sequences(cfg, seed)?;
    let lambdas: Vec<(usize, LGParams)> = checkpoints
        .iter()
        .map(|(e, ck)| {
            let pv = ck.params()?;
            Ok((*e, LGParams::from_params(&pv, &pv.values)?))
        })
        .collect::<Result<_>>()?;

    type PerSequence = (
        Vec<AdditiveErrorRow>,
        Vec<MarginalErrorRow>,
        ReferenceErrorRow,
    );
    let per_seq: Vec<PerSequence> = eval
        .par_iter()
        .enumerate()
        .map(|(j, traj)| {
            let mut add = Vec::new();
            let mut marg = Vec::new();
            for (epoch, lambda) in &lambdas {
                let errs = additive_error_prefixes(
                    &cfg.theta,
                    lambda,
                    &traj.observations,
                    &cfg.eval_prefixes,
                )?;
                for (&n, e) in cfg.eval_prefixes.iter().zip(errs) {
                    add.push(AdditiveErrorRow {
                        checkpoint_epoch: *epoch,
                        sequence_id: j,
                        n,
                        abs_error: e,
                    });
                }
                if j < cfg.marginal_error_sequences {
                    for (k, e) in marginal_errors(&cfg.theta, lambda, &traj.observations)?
                        .into_iter()
                        .enumerate()
                    {
                        marg.push(MarginalErrorRow {
                            checkpoint_epoch: *epoch,
                            sequence_id: j,
                            k,
                            abs_error: e,
                        });
                    }
                }
            }
            let (_, sm) = kalman_smoother(&cfg.theta, &traj.observations)?;
            let means: Vec<Vec<f64>> = sm.marginals.iter().map(|g| g.mean.clone()).collect();
            let (mean_err_ref, var_err_ref) = reference_error(&means, &traj.states);
            Ok((
                add,
                marg,
                ReferenceErrorRow {
                    sequence_id: j,
                    mean_err_ref,
                    var_err_ref,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut results = LinearResults {
        curve,
        checkpoints,
        additive_errors: Vec::new(),
        marginal_errors: Vec::new(),
        reference_errors: Vec::new(),
    };
    for (add, marg, reference) in per_seq {
        results.additive_errors.extend(add);
        results.marginal_errors.extend(marg);
        results.reference_errors.push(reference);
    }
    results
        .additive_errors
        .sort_by_key(|r| (r.checkpoint_epoch, r.sequence_id, r.n));
    results
        .marginal_errors
        .sort_by_key(|r| (r.checkpoint_epoch, r.sequence_id, r.k));
    Ok(results)
}

pub fn summarize_linear(cfg: &LinearConfig, res: &LinearResults) -> LinearSummary {
    let elbo: Vec<f64> = res.curve.iter().map(|r| r.elbo).collect();
    let trailing = trailing_average(&elbo, 10);
    let worst_trailing_drop = trailing
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_elbo_excess = res
        .curve
        .iter()
        .map(|r| r.elbo - r.loglik)
        .fold(f64::NEG_INFINITY, f64::max);

    let mut stops: Vec<usize> = cfg.stopping_epochs.clone();
    stops.sort_unstable();
    stops.dedup();
    let final_error = |epoch: usize, j: usize| {
        res.additive_errors
            .iter()
            .find(|r| r.checkpoint_epoch == epoch && r.sequence_id == j && r.n == cfg.n_eval)
            .map(|r| r.abs_error)
    };
    let monotone_sequences = (0..cfg.eval_sequences)
        .filter(|&j| {
            let errs: Vec<Option<f64>> = stops.iter().map(|&e| final_error(e, j)).collect();
            errs.iter().all(Option::is_some)
                && errs.windows(2).all(|w| w[1].unwrap() < w[0].unwrap())
        })
        .count();

    let ns: Vec<f64> = cfg.eval_prefixes.iter().map(|&n| n as f64).collect();
    let pearson_by_stop = stops
        .iter()
        .map(|&e| {
            let means: Vec<f64> = cfg
                .eval_prefixes
                .iter()
                .map(|&n| {
                    let v: Vec<f64> = res
                        .additive_errors
                        .iter()
                        .filter(|r| r.checkpoint_epoch == e && r.n == n)
                        .map(|r| r.abs_error)
                        .collect();
                    v.iter().sum::<f64>() / v.len().max(1) as f64
                })
                .collect();
            (e, pearson(&ns, &means))
        })
        .collect();
    LinearSummary {
        worst_trailing_drop,
        worst_elbo_excess,
        monotone_sequences,
        sequences: cfg.eval_sequences,
        pearson: pearson_by_stop,
    }
}

/// Runs the linear experiment and writes its artifacts.
pub fn run_linear_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    config.expect_kind(ExperimentKind::Linear)?;
    let cfg = &config.linear;
    let mut out = Outputs::create(&config.output_dir()?)?;
    let trained = match train_linear(cfg, config.seed) {
        Ok(t) => t,
        Err(failure) => {
            if let Some(ck) = &failure.last_good {
                ck.save(&out.path("checkpoint_last_good.json"))?;
            }
            return Err(failure.into());
        }
    };
    let res = evaluate_linear(cfg, config.seed, trained)?;
    out.write_csv("training_curve.csv", &res.curve)?;
    out.write_csv("additive_error.csv", &res.additive_errors)?;
    if !res.marginal_errors.is_empty() {
        out.write_csv("marginal_error.csv", &res.marginal_errors)?;
    }
    out.write_csv("reference_error.csv", &res.reference_errors)?;
    for (epoch, ck) in &res.checkpoints {
        out.write_json(&format!("checkpoint_epoch_{epoch}.json"), ck)?;
    }
    let summary = summarize_linear(cfg, &res);
    out.write_json("summary.json", &summary)?;

    let mut elbo = BTreeMap::new();
    elbo.insert(
        "lambda".to_string(),
        res.curve.iter().map(|r| r.elbo).collect(),
    );
    let mut errors = BTreeMap::new();
    for (epoch, _) in &res.checkpoints {
        errors.insert(
            format!("epoch_{epoch}"),
            res.additive_errors
                .iter()
                .filter(|r| r.checkpoint_epoch == *epoch && r.n == cfg.n_eval)
                .map(|r| r.abs_error)
                .collect(),
        );
    }
    out.finish(ExperimentKind::Linear, config, elbo, errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LinearConfig {
        LinearConfig {
            n_train: 16,
            train_sequences: 2,
            epochs: 3,
            stopping_epochs: vec![0, 3],
            eval_sequences: 2,
            n_eval: 40,
            eval_prefixes: vec![10, 20, 40],
            ..LinearConfig::default()
        }
    }

    #[test]
    fn exact_initialization_has_no_error() {
        let cfg = LinearConfig {
            lambda_init: LambdaInit::Theta,
            epochs: 0,
            stopping_epochs: vec![0],
            ..small()
        };
        let res = linear_experiment(&cfg, 4).unwrap();
        assert!(res.additive_errors.iter().all(|r| r.abs_error < 1e-8));
        assert!((res.curve[0].elbo - res.curve[0].loglik).abs() < 1e-8 * res.curve[0].loglik.abs());
    }

    #[test]
    fn runs_are_deterministic() {
        let a = linear_experiment(&small(), 9).unwrap();
        let b = linear_experiment(&small(), 9).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.additive_errors, b.additive_errors);
        assert_eq!(a.additive_errors.len(), 2 * 2 * 3);
        assert_eq!(a.marginal_errors.len(), 2 * 41);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small();
        cfg.stopping_epochs = vec![10];
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.eval_prefixes = vec![41];
        assert!(cfg.validate().is_err());
        let json = serde_json::to_string(&LinearConfig::default()).unwrap();
        let back: LinearConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, LinearConfig::default());
    }

    #[test]
    fn reference_error_moments() {
        let (m, v) = reference_error(&[vec![0.0], vec![1.0]], &[vec![1.0], vec![1.0]]);
        assert_eq!((m, v), (0.5, 0.25));
    }
}
