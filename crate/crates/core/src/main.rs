use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bvsmooth::experiments::linear::{evaluate_linear, summarize_linear};
use bvsmooth::experiments::nonlinear::{
    evaluate_nonlinear, summarize_nonlinear, SavedModel, TrainedModel,
};
use bvsmooth::experiments::{
    run_bound_verify, run_linear_experiment, run_nonlinear_experiment, ExperimentConfig,
    ExperimentKind, Outputs, RunRecord,
};
use bvsmooth::ffbsi::{
    bootstrap_filter, ffbsi, ffbsi_additive, LinearGaussianModel, Model, NonlinearModel,
};
use bvsmooth::optim::Checkpoint;
use bvsmooth::ssm::{simulate_lg, simulate_nonlinear, AdditiveFunctional, Trajectory};
use bvsmooth::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bvsmooth",
    version,
    about = "Backward variational smoothing experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelChoice {
    Linear,
    Nonlinear,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory from the linear or nonlinear model of the config.
    Simulate {
        #[arg(long, value_enum, default_value = "linear")]
        model: ModelChoice,
        /// Index of the last observation.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Train the linear-Gaussian family and evaluate it at the stopping epochs.
    TrainLinear,
    /// Train the Johnson and gated amortized models and compare them to FFBSi.
    TrainNonlinear,
    /// Re-evaluate the models saved in a previous run directory.
    EvalError {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Particle smoothing of a trajectory CSV (or a fresh simulation).
    Ffbsi {
        #[arg(long, value_enum, default_value = "nonlinear")]
        model: ModelChoice,
        /// Trajectory CSV as written by `simulate`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Check the additive error bound on random finite-state models.
    VerifyBound,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    t.write_csv(BufWriter::new(File::create(path)?))
}

fn simulate(cfg: &ExperimentConfig, model: ModelChoice, n: usize) -> Result<()> {
    let traj = match model {
        ModelChoice::Linear => simulate_lg(&cfg.linear.theta, n, cfg.seed)?,
        ModelChoice::Nonlinear => {
            let nl = &cfg.nonlinear;
            simulate_nonlinear(&nl.dynamics, &nl.emission.emission()?, n, cfg.seed)?
        }
    };
    let mut out = Outputs::create(&cfg.output_dir()?)?;
    write_trajectory(&out.path("trajectory.csv"), &traj)?;
    out.register("trajectory.csv")?;
    out.finish(
        ExperimentKind::from(model),
        cfg,
        Default::default(),
        Default::default(),
    )?;
    Ok(())
}

impl From<ModelChoice> for ExperimentKind {
    fn from(m: ModelChoice) -> Self {
        match m {
            ModelChoice::Linear => ExperimentKind::Linear,
            ModelChoice::Nonlinear => ExperimentKind::Nonlinear,
        }
    }
}

fn run_ffbsi(
    cfg: &ExperimentConfig,
    choice: ModelChoice,
    input: Option<&Path>,
    n: usize,
    particles: Option<usize>,
    trajectories: Option<usize>,
) -> Result<()> {
    let nl = &cfg.nonlinear;
    let model: Box<dyn Model> = match choice {
        ModelChoice::Linear => Box::new(LinearGaussianModel::new(&cfg.linear.theta)?),
        ModelChoice::Nonlinear => {
            Box::new(NonlinearModel::new(&nl.dynamics, &nl.emission.emission()?)?)
        }
    };
    let traj = match input {
        Some(p) => Trajectory::read_csv(File::open(p)?)?,
        None => match choice {
            ModelChoice::Linear => simulate_lg(&cfg.linear.theta, n, cfg.seed)?,
            ModelChoice::Nonlinear => {
                simulate_nonlinear(&nl.dynamics, &nl.emission.emission()?, n, cfg.seed)?
            }
        },
    };
    let n_particles = particles.unwrap_or(nl.ffbsi_particles);
    let n_traj = trajectories.unwrap_or(nl.ffbsi_trajectories);
    let pf = bootstrap_filter(model.as_ref(), &traj.observations, n_particles, cfg.seed)?;
    let sample = ffbsi(model.as_ref(), &pf, n_traj, cfg.seed)?;

    let mut out = Outputs::create(&cfg.output_dir()?)?;
    write_trajectory(&out.path("trajectory.csv"), &traj)?;
    out.register("trajectory.csv")?;
    sample.write_csv(BufWriter::new(File::create(
        out.path("ffbsi_trajectories.csv"),
    )?))?;
    out.register("ffbsi_trajectories.csv")?;
    let means = sample.marginal_means();
    let vars = sample.marginal_variances();
    let rows: Vec<(usize, f64, f64, f64)> = (0..means.len())
        .map(|k| (k, means[k][0], vars[k][0], traj.states[k][0]))
        .collect();
    let mut w = csv::Writer::from_path(out.path("ffbsi_marginals.csv"))?;
    w.write_record(["k", "mean_0", "var_0", "true_state_0"])?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    out.register("ffbsi_marginals.csv")?;
    let (sum, se) = ffbsi_additive(&sample, &AdditiveFunctional::state_sum(model.state_dim()))?;
    let mut errors = std::collections::BTreeMap::new();
    errors.insert("state_sum".to_string(), sum);
    errors.insert("state_sum_stderr".to_string(), se);
    errors.insert("loglik".to_string(), vec![pf.loglik]);
    out.finish(
        ExperimentKind::from(choice),
        cfg,
        Default::default(),
        errors,
    )?;
    Ok(())
}

fn eval_error(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunRecord> {
    let manifest: RunRecord =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json"))?)?;
    let mut out = Outputs::create(&cfg.output_dir()?)?;
    let mut errors = std::collections::BTreeMap::new();
    match manifest.kind {
        ExperimentKind::Linear => {
            let mut checkpoints = Vec::new();
            for f in &manifest.files {
                if let Some(epoch) = f
                    .path
                    .strip_prefix("checkpoint_epoch_")
                    .and_then(|s| s.strip_suffix(".json"))
                {
                    let epoch: usize = epoch.parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad checkpoint name {}", f.path))
                    })?;
                    checkpoints.push((epoch, Checkpoint::load(&run_dir.join(&f.path))?));
                }
            }
            checkpoints.sort_by_key(|(e, _)| *e);
            let mut lin = cfg.linear.clone();
            lin.stopping_epochs = checkpoints.iter().map(|(e, _)| *e).collect();
            lin.epochs = lin.stopping_epochs.iter().copied().max().unwrap_or(0);
            let res = evaluate_linear(&lin, cfg.seed, (Vec::new(), checkpoints))?;
            out.write_csv("additive_error.csv", &res.additive_errors)?;
            if !res.marginal_errors.is_empty() {
                out.write_csv("marginal_error.csv", &res.marginal_errors)?;
            }
            out.write_csv("reference_error.csv", &res.reference_errors)?;
            let s = summarize_linear(&lin, &res);
            out.write_json(
                "summary.json",
                &serde_json::json!({
                    "monotone_sequences": s.monotone_sequences,
                    "sequences": s.sequences,
                    "pearson": s.pearson,
                }),
            )?;
            for (epoch, _) in &res.checkpoints {
                errors.insert(
                    format!("epoch_{epoch}"),
                    res.additive_errors
                        .iter()
                        .filter(|r| r.checkpoint_epoch == *epoch && r.n == lin.n_eval)
                        .map(|r| r.abs_error)
                        .collect(),
                );
            }
        }
        ExperimentKind::Nonlinear => {
            let mut trained = Vec::new();
            for name in ["johnson", "gated"] {
                let saved: SavedModel = serde_json::from_str(&std::fs::read_to_string(
                    run_dir.join(format!("model_{name}.json")),
                )?)?;
                trained.push(TrainedModel {
                    mode: saved.arch.mode,
                    saved,
                    curve: Vec::new(),
                });
            }
            let res = evaluate_nonlinear(&cfg.nonlinear, cfg.seed, trained)?;
            out.write_csv("errors_vs_n.csv", &res.errors_vs_n)?;
            out.write_csv("final_table.csv", &res.final_table)?;
            out.write_csv("reference_status.csv", &res.reference_status)?;
            out.write_json("summary.json", &summarize_nonlinear(&res))?;
            errors.insert(
                "johnson".into(),
                res.final_table
                    .iter()
                    .map(|r| r.smooth_err_johnson)
                    .collect(),
            );
            errors.insert(
                "gated".into(),
                res.final_table.iter().map(|r| r.smooth_err_gated).collect(),
            );
        }
        ExperimentKind::BoundVerify => {
            return Err(Error::InvalidArgument(
                "bound-verify runs have no trained models".into(),
            ));
        }
    }
    out.finish(manifest.kind, cfg, Default::default(), errors)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if let Some(t) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { model, n } => simulate(&cfg, model, n)?,
        Command::TrainLinear => {
            run_linear_experiment(&cfg)?;
        }
        Command::TrainNonlinear => {
            run_nonlinear_experiment(&cfg)?;
        }
        Command::EvalError { run_dir } => {
            eval_error(&cfg, &run_dir)?;
        }
        Command::Ffbsi {
            model,
            input,
            n,
            particles,
            trajectories,
        } => run_ffbsi(&cfg, model, input.as_deref(), n, particles, trajectories)?,
        Command::VerifyBound => {
            run_bound_verify(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::BoundViolation { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
