//! Amortized smoothing under a nonlinear emission: the conjugate (Johnson)
//! update against the learned gated update, both scored against a particle
//! smoother on held-out sequences.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    trailing_average, ExperimentConfig, ExperimentKind, OptimConfig, Outputs, RunRecord,
    TrainingFailure,
};
use crate::amortized::{
    mc_elbo_nonlinear, AmortizedModel, Architecture, Layer, McNoise, Mlp, UpdateMode,
    VariationalDynamics, DEFAULT_HIDDEN,
};
use crate::autodiff::value_and_grad;
use crate::error::{Error, Result};
use crate::ffbsi::{bootstrap_filter, ffbsi, ffbsi_additive, NonlinearModel};
use crate::kalman::{kalman_smoother, smoothed_additive};
use crate::linalg::Matrix;
use crate::optim::{clip_grad_norm, Checkpoint};
use crate::rng::substream;
use crate::ssm::{
    simulate_nonlinear_stream, AdditiveFunctional, LGParams, NonlinearEmission, Trajectory,
};
use crate::variational::variational_smoothed_additive;

const TRAIN_STREAM: u64 = 11;
const EVAL_STREAM: u64 = 12;
const INIT_STREAM: u64 = 13;
const NOISE_STREAM: u64 = 14;
const CURVE_NOISE_STREAM: u64 = 15;
const REFERENCE_STREAM: u64 = 16;

pub const MODES: [UpdateMode; 2] = [UpdateMode::Johnson, UpdateMode::Gated];

fn mode_name(mode: UpdateMode) -> &'static str {
    match mode {
        UpdateMode::Johnson => "johnson",
        UpdateMode::Gated => "gated",
    }
}

fn mode_label(mode: UpdateMode) -> u64 {
    match mode {
        UpdateMode::Johnson => 1,
        UpdateMode::Gated => 2,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// `y = cos(tanh(W x + b)) + noise`.
    Noninjective,
    /// `y = W x + noise`; the bias must be zero so the exact smoother applies.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmissionConfig {
    pub kind: DecoderKind,
    /// Single-layer decoder `x ↦ W x + b`.
    pub decoder: Mlp,
    /// Emission noise variance (isotropic).
    pub noise_var: f64,
}

impl Default for EmissionConfig {
    fn default() -> Self {
        EmissionConfig {
            kind: DecoderKind::Noninjective,
            decoder: Mlp {
                layers: vec![Layer {
                    weights: Matrix::from_rows(&[&[0.5]]),
                    bias: vec![0.6],
                }],
            },
            noise_var: 0.001,
        }
    }
}

impl EmissionConfig {
    pub fn emission(&self) -> Result<NonlinearEmission> {
        let m = self.decoder.output_dim();
        let nonlinear = self.kind == DecoderKind::Noninjective;
        Ok(NonlinearEmission {
            decoder: self.decoder.clone(),
            output_tanh: nonlinear,
            apply_cos: nonlinear,
            r: Matrix::identity(m).scale(self.noise_var),
        })
    }

    /// The equivalent linear-Gaussian model, for the linear decoder only.
    pub fn exact_model(&self, dynamics: &LGParams) -> Result<Option<LGParams>> {
        if self.kind != DecoderKind::Linear {
            return Ok(None);
        }
        let layer = &self.decoder.layers[0];
        let m = self.decoder.output_dim();
        Ok(Some(LGParams {
            b: layer.weights.clone(),
            r: Matrix::identity(m).scale(self.noise_var),
            ..dynamics.clone()
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearConfig {
    /// Prior and transition of the data model; the `b` and `r` fields are unused.
    pub dynamics: LGParams,
    pub emission: EmissionConfig,
    /// Hidden widths of the encoder / update network.
    pub hidden: Vec<usize>,
    /// Forget gate on the gated update.
    pub gate: bool,
    pub train_sequences: usize,
    pub n_train: usize,
    pub epochs: usize,
    pub optimizer: OptimConfig,
    /// Reparameterized samples per step in the Monte Carlo ELBO.
    pub mc_samples: usize,
    pub eval_sequences: usize,
    pub n_eval: usize,
    pub eval_prefixes: Vec<usize>,
    pub ffbsi_particles: usize,
    pub ffbsi_trajectories: usize,
    /// Particles for the log-likelihood column of the training curve.
    pub curve_particles: usize,
    /// How many evaluation sequences get per-step smoothed means written.
    pub smoothed_state_sequences: usize,
}

impl Default for NonlinearConfig {
    fn default() -> Self {
        NonlinearConfig {
            dynamics: LGParams::scalar(0.0, 1.0, 0.9, 0.1, 1.0, 0.5),
            emission: EmissionConfig::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            gate: true,
            train_sequences: 64,
            n_train: 100,
            epochs: 100,
            optimizer: OptimConfig::with_lr(1e-3),
            mc_samples: 8,
            eval_sequences: 5,
            n_eval: 500,
            eval_prefixes: vec![100, 200, 300, 400, 500],
            ffbsi_particles: 2000,
            ffbsi_trajectories: 1000,
            curve_particles: 500,
            smoothed_state_sequences: 1,
        }
    }
}

impl NonlinearConfig {
    pub fn validate(&self) -> Result<()> {
        self.dynamics.check_shapes()?;
        self.optimizer.validate()?;
        let emission = self.emission.emission()?;
        emission.validate(self.dynamics.state_dim())?;
        if self.emission.decoder.layers.len() != 1 || !(self.emission.noise_var > 0.0) {
            return Err(Error::InvalidConfig(
                "decoder must be a single layer with noise_var > 0".into(),
            ));
        }
        if self.emission.kind == DecoderKind::Linear
            && self.emission.decoder.layers[0]
                .bias
                .iter()
                .any(|b| *b != 0.0)
        {
            return Err(Error::InvalidConfig(
                "the linear decoder must have zero bias".into(),
            ));
        }
        let counts = [
            self.train_sequences,
            self.n_train,
            self.mc_samples,
            self.eval_sequences,
            self.n_eval,
            self.ffbsi_particles,
            self.curve_particles,
        ];
        if counts.contains(&0) || self.ffbsi_trajectories < 2 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "counts must be >= 1 (ffbsi_trajectories >= 2) and hidden widths positive".into(),
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
        Ok(())
    }

    pub fn architecture(&self, mode: UpdateMode) -> Architecture {
        Architecture::new(
            mode,
            self.dynamics.state_dim(),
            self.emission.decoder.output_dim(),
            &self.hidden,
            self.gate,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub elbo: f64,
    pub loglik: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorVsNRow {
    pub model: String,
    pub sequence_id: usize,
    pub n: usize,
    pub abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub sequence_id: usize,
    pub mean_err_ref: f64,
    pub var_err_ref: f64,
    pub smooth_err_johnson: f64,
    pub smooth_err_gated: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStatus {
    pub sequence_id: usize,
    /// `ok`, or the reason the reference is missing.
    pub status: String,
}

/// A trained model together with what is needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub arch: Architecture,
    pub checkpoint: Checkpoint,
}

impl SavedModel {
    pub fn model(&self) -> Result<AmortizedModel> {
        let pv = self.checkpoint.params()?;
        AmortizedModel::from_params(&self.arch, &pv, &pv.values)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub mode: UpdateMode,
    pub saved: SavedModel,
    pub curve: Vec<CurveRow>,
}

#[derive(Clone, Debug)]
pub struct NonlinearResults {
    pub models: Vec<TrainedModel>,
    pub errors_vs_n: Vec<ErrorVsNRow>,
    pub smoothed_states: Vec<SmoothedStateRow>,
    pub final_table: Vec<FinalRow>,
    pub reference_status: Vec<ReferenceStatus>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NonlinearSummary {
    pub gated_better: usize,
    pub compared: usize,
    pub median_ratio: f64,
}

pub fn training_sequences(cfg: &NonlinearConfig, seed: u64) -> Result<Vec<Trajectory>> {
    let emission = cfg.emission.emission()?;
    (0..cfg.train_sequences)
        .map(|i| {
            simulate_nonlinear_stream(
                &cfg.dynamics,
                &emission,
                cfg.n_train,
                seed,
                substream(TRAIN_STREAM, i as u64),
            )
        })
        .collect()
}

pub fn evaluation_sequences(cfg: &NonlinearConfig, seed: u64) -> Result<Vec<Trajectory>> {
    let emission = cfg.emission.emission()?;
    (0..cfg.eval_sequences)
        .map(|j| {
            simulate_nonlinear_stream(
                &cfg.dynamics,
                &emission,
                cfg.n_eval,
                seed,
                substream(EVAL_STREAM, j as u64),
            )
        })
        .collect()
}

/// Monte Carlo ELBO of the amortized family on `ys` and its gradient.
pub fn amortized_elbo_and_grad(
    cfg: &NonlinearConfig,
    emission: &NonlinearEmission,
    arch: &Architecture,
    layout: &crate::optim::ParamVector,
    values: &[f64],
    ys: &[Vec<f64>],
    noise: &McNoise,
) -> Result<(f64, Vec<f64>)> {
    value_and_grad(values, |vars| {
        let model = AmortizedModel::from_params(arch, layout, vars)?;
        let run = model.run(ys)?;
        mc_elbo_nonlinear(
            &cfg.dynamics.lift(),
            emission,
            &emission.decoder.lift(),
            &run.family,
            ys,
            noise,
        )
    })
}

fn amortized_elbo(
    cfg: &NonlinearConfig,
    emission: &NonlinearEmission,
    model: &AmortizedModel,
    ys: &[Vec<f64>],
    noise: &McNoise,
) -> Result<f64> {
    let run = model.run(ys)?;
    mc_elbo_nonlinear(
        &cfg.dynamics,
        emission,
        &emission.decoder,
        &run.family,
        ys,
        noise,
    )
}

/// Adam on the Monte Carlo ELBO, fresh noise for every step.
pub fn train_amortized(
    cfg: &NonlinearConfig,
    mode: UpdateMode,
    data: &[Trajectory],
    seed: u64,
) -> std::result::Result<TrainedModel, TrainingFailure> {
    cfg.validate()?;
    let emission = cfg.emission.emission()?;
    let arch = cfg.architecture(mode);
    let label = mode_label(mode);
    let d = cfg.dynamics.state_dim();
    let mut rng = crate::rng::stream_rng(seed, substream(INIT_STREAM, label));
    let init = AmortizedModel::init(
        arch.clone(),
        VariationalDynamics::from_lg(&cfg.dynamics),
        &mut rng,
    )?;
    let mut params = init.to_params()?;
    let mut opt = cfg.optimizer.state(params.len());

    // fixed noise so the curve is comparable across epochs
    let curve_noise: Vec<McNoise> = data
        .iter()
        .enumerate()
        .map(|(i, t)| {
            McNoise::draw(
                t.observations.len(),
                d,
                cfg.mc_samples,
                seed,
                substream(CURVE_NOISE_STREAM, i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let model_pf = NonlinearModel::new(&cfg.dynamics, &emission)?;
    let mut loglik = 0.0;
    for (i, t) in data.iter().enumerate() {
        loglik += bootstrap_filter(
            &model_pf,
            &t.observations,
            cfg.curve_particles,
            substream(CURVE_NOISE_STREAM, 1000 + i as u64),
        )?
        .loglik;
    }
    loglik /= data.len() as f64;
    let layout = params.clone();
    let curve_point = |values: &[f64], epoch: usize| -> Result<CurveRow> {
        let model = AmortizedModel::from_params(&arch, &layout, values)?;
        let total = data
            .par_iter()
            .zip(&curve_noise)
            .map(|(t, noise)| amortized_elbo(cfg, &emission, &model, &t.observations, noise))
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum::<f64>();
        Ok(CurveRow {
            epoch,
            elbo: total / data.len() as f64,
            loglik,
        })
    };

    let mut curve = vec![curve_point(&params.values, 0)?];
    for epoch in 1..=cfg.epochs {
        for (i, t) in data.iter().enumerate() {
            let before = opt.clone();
            let stream = substream(
                substream(substream(NOISE_STREAM, label), epoch as u64),
                i as u64,
            );
            let step = McNoise::draw(t.observations.len(), d, cfg.mc_samples, seed, stream)
                .and_then(|noise| {
                    amortized_elbo_and_grad(
                        cfg,
                        &emission,
                        &arch,
                        &params,
                        &params.values,
                        &t.observations,
                        &noise,
                    )
                })
                .and_then(|(_, mut g)| {
                    if let Some(c) = cfg.optimizer.clip_norm {
                        clip_grad_norm(&mut g, c);
                    }
                    let mut next = params.values.clone();
                    opt.step(&mut next, &g)?;
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
        let row = curve_point(&params.values, epoch).map_err(|source| TrainingFailure {
            epoch,
            last_good: Some(Checkpoint::new(&params, &opt)),
            source,
        })?;
        curve.push(row);
    }
    Ok(TrainedModel {
        mode,
        saved: SavedModel {
            arch,
            checkpoint: Checkpoint::new(&params, &opt),
        },
        curve,
    })
}

/// Reference smoothing on one prefix: `(h estimate, smoothed means)`.
fn reference_on_prefix(
    cfg: &NonlinearConfig,
    pf_model: &NonlinearModel,
    exact: Option<&LGParams>,
    ys: &[Vec<f64>],
    f: &AdditiveFunctional,
    seed: u64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    match exact {
        Some(p) => {
            let (_, sm) = kalman_smoother(p, ys)?;
            let means = sm.marginals.iter().map(|g| g.mean.clone()).collect();
            Ok((smoothed_additive(&sm, f)?, means))
        }
        None => {
            let pf = bootstrap_filter(pf_model, ys, cfg.ffbsi_particles, seed)?;
            let sample = ffbsi(pf_model, &pf, cfg.ffbsi_trajectories, substream(seed, 0xB5))?;
            Ok((ffbsi_additive(&sample, f)?.0, sample.marginal_means()))
        }
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Per-step smoothed means of the first evaluation sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedStateRow {
    pub sequence_id: usize,
    pub k: usize,
    pub coord: usize,
    pub true_state: f64,
    pub reference: f64,
    pub johnson: f64,
    pub gated: f64,
}

struct SequenceEval {
    rows: Vec<ErrorVsNRow>,
    states: Vec<SmoothedStateRow>,
    table: FinalRow,
    status: ReferenceStatus,
}

fn evaluate_sequence(
    cfg: &NonlinearConfig,
    models: &[(UpdateMode, AmortizedModel)],
    j: usize,
    traj: &Trajectory,
    seed: u64,
) -> Result<SequenceEval> {
    let emission = cfg.emission.emission()?;
    let pf_model = NonlinearModel::new(&cfg.dynamics, &emission)?;
    let exact = cfg.emission.exact_model(&cfg.dynamics)?;
    let f = AdditiveFunctional::state_sum(cfg.dynamics.state_dim());
    let mut prefixes = cfg.eval_prefixes.clone();
    if !prefixes.contains(&cfg.n_eval) {
        prefixes.push(cfg.n_eval);
    }
    let mut rows = Vec::new();
    let mut table = FinalRow {
        sequence_id: j,
        mean_err_ref: f64::NAN,
        var_err_ref: f64::NAN,
        smooth_err_johnson: f64::NAN,
        smooth_err_gated: f64::NAN,
    };
    let mut status = "ok".to_string();
    let mut states = Vec::new();
    for (pi, &n) in prefixes.iter().enumerate() {
        let ys = &traj.observations[..=n];
        let ref_seed = substream(substream(seed, REFERENCE_STREAM), (j * 1024 + pi) as u64);
        let (reference, means) =
            match reference_on_prefix(cfg, &pf_model, exact.as_ref(), ys, &f, ref_seed) {
                Ok(r) => r,
                Err(e @ Error::WeightCollapse { .. }) => {
                    status = e.to_string();
                    continue;
                }
                Err(e) => return Err(e),
            };
        if n == cfg.n_eval {
            let (m, v) = super::linear::reference_error(&means, &traj.states);
            table.mean_err_ref = m;
            table.var_err_ref = v;
            if j < cfg.smoothed_state_sequences {
                for (k, (x, r)) in traj.states.iter().zip(&means).enumerate() {
                    for c in 0..x.len() {
                        states.push(SmoothedStateRow {
                            sequence_id: j,
                            k,
                            coord: c,
                            true_state: x[c],
                            reference: r[c],
                            johnson: f64::NAN,
                            gated: f64::NAN,
                        });
                    }
                }
            }
        }
        for (mode, model) in models {
            let q = model.run(ys)?.family;
            if n == cfg.n_eval && !states.is_empty() {
                let sm = q.smoothed()?;
                let d = cfg.dynamics.state_dim();
                for row in states.iter_mut() {
                    let v = sm.marginals[row.k].mean[row.coord];
                    match mode {
                        UpdateMode::Johnson => row.johnson = v,
                        UpdateMode::Gated => row.gated = v,
                    }
                }
                debug_assert_eq!(states.len(), (n + 1) * d);
            }
            let err = l1(&variational_smoothed_additive(&q, &f)?, &reference);
            if n == cfg.n_eval {
                match mode {
                    UpdateMode::Johnson => table.smooth_err_johnson = err,
                    UpdateMode::Gated => table.smooth_err_gated = err,
                }
            }
            if cfg.eval_prefixes.contains(&n) {
                rows.push(ErrorVsNRow {
                    model: mode_name(*mode).to_string(),
                    sequence_id: j,
                    n,
                    abs_error: err,
                });
            }
        }
    }
    Ok(SequenceEval {
        rows,
        states,
        table,
        status: ReferenceStatus {
            sequence_id: j,
            status,
        },
    })
}

pub fn evaluate_nonlinear(
    cfg: &NonlinearConfig,
    seed: u64,
    trained: Vec<TrainedModel>,
) -> Result<NonlinearResults> {
    let eval = evaluation_sequences(cfg, seed)?;
    let models: Vec<(UpdateMode, AmortizedModel)> = trained
        .iter()
        .map(|t| Ok((t.mode, t.saved.model()?)))
        .collect::<Result<_>>()?;
    let per_seq = eval
        .par_iter()
        .enumerate()
        .map(|(j, traj)| evaluate_sequence(cfg, &models, j, traj, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut res = NonlinearResults {
        models: trained,
        errors_vs_n: Vec::new(),
        smoothed_states: Vec::new(),
        final_table: Vec::new(),
        reference_status: Vec::new(),
    };
    for s in per_seq {
        res.errors_vs_n.extend(s.rows);
        res.smoothed_states.extend(s.states);
        res.final_table.push(s.table);
        res.reference_status.push(s.status);
    }
    Ok(res)
}

pub fn nonlinear_experiment(cfg: &NonlinearConfig, seed: u64) -> Result<NonlinearResults> {
    let data = training_sequences(cfg, seed)?;
    let trained = MODES
        .iter()
        .map(|&m| train_amortized(cfg, m, &data, seed).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    evaluate_nonlinear(cfg, seed, trained)
}

pub fn summarize_nonlinear(res: &NonlinearResults) -> NonlinearSummary {
    let pairs: Vec<(f64, f64)> = res
        .final_table
        .iter()
        .map(|r| (r.smooth_err_gated, r.smooth_err_johnson))
        .filter(|(g, j)| g.is_finite() && j.is_finite())
        .collect();
    let mut ratios: Vec<f64> = pairs.iter().map(|(g, j)| g / j).collect();
    ratios.sort_by(f64::total_cmp);
    let median_ratio = match ratios.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => ratios[n / 2],
        n => 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]),
    };
    NonlinearSummary {
        gated_better: pairs.iter().filter(|(g, j)| g < j).count(),
        compared: pairs.len(),
        median_ratio,
    }
}

/// Runs both trainings and the evaluation, writing every artifact.
pub fn run_nonlinear_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    config.expect_kind(ExperimentKind::Nonlinear)?;
    let cfg = &config.nonlinear;
    cfg.validate()?;
    let mut out = Outputs::create(&config.output_dir()?)?;
    let data = training_sequences(cfg, config.seed)?;
    let mut trained = Vec::new();
    for mode in MODES {
        match train_amortized(cfg, mode, &data, config.seed) {
            Ok(t) => trained.push(t),
            Err(failure) => {
                if let Some(ck) = &failure.last_good {
                    ck.save(&out.path(&format!("checkpoint_last_good_{}.json", mode_name(mode))))?;
                }
                return Err(failure.into());
            }
        }
    }
    let res = evaluate_nonlinear(cfg, config.seed, trained)?;
    let mut elbo = BTreeMap::new();
    for t in &res.models {
        let name = mode_name(t.mode);
        out.write_csv(&format!("training_curve_{name}.csv"), &t.curve)?;
        out.write_json(&format!("model_{name}.json"), &t.saved)?;
        elbo.insert(name.to_string(), t.curve.iter().map(|r| r.elbo).collect());
    }
    out.write_csv("errors_vs_n.csv", &res.errors_vs_n)?;
    out.write_csv("final_table.csv", &res.final_table)?;
    out.write_csv("reference_status.csv", &res.reference_status)?;
    if !res.smoothed_states.is_empty() {
        out.write_csv("smoothed_states.csv", &res.smoothed_states)?;
    }
    out.write_json("summary.json", &summarize_nonlinear(&res))?;

    let mut errors = BTreeMap::new();
    errors.insert(
        "johnson".to_string(),
        res.final_table
            .iter()
            .map(|r| r.smooth_err_johnson)
            .collect(),
    );
    errors.insert(
        "gated".to_string(),
        res.final_table.iter().map(|r| r.smooth_err_gated).collect(),
    );
    errors.insert(
        "mean_err_ref".to_string(),
        res.final_table.iter().map(|r| r.mean_err_ref).collect(),
    );
    out.finish(ExperimentKind::Nonlinear, config, elbo, errors)
}

/// Trailing average of a model's training curve.
pub fn smoothed_curve(model: &TrainedModel, width: usize) -> Vec<f64> {
    trailing_average(
        &model.curve.iter().map(|r| r.elbo).collect::<Vec<_>>(),
        width,
    )
}
