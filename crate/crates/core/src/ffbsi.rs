//! Bootstrap particle filter and forward-filtering backward-simulation
//! (FFBSi), used as the reference smoother when no closed form exists.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauss::sample_with_factor;
use crate::linalg::Matrix;
use crate::rng::{stream_rng, substream, StreamRng};
use crate::ssm::{eval_additive, fmt_f64, AdditiveFunctional, LGParams, NonlinearEmission};

/// Linear-Gaussian transition `x' ~ N(A x, Q)` with cached factors.
#[derive(Clone, Debug)]
pub struct GaussianTransition {
    pub a: Matrix,
    pub q: Matrix,
    q_factor: Matrix,
    /// `L⁻¹` for `Q = L Lᵀ`, used to whiten residuals.
    q_whiten: Matrix,
}

impl GaussianTransition {
    pub fn new(a: &Matrix, q: &Matrix) -> Result<Self> {
        let ch = q
            .cholesky()
            .map_err(|_| Error::not_pd("transition covariance"))?;
        let d = q.rows();
        let mut q_whiten = Matrix::zeros(d, d);
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            let col = ch.forward_sub(&e);
            for i in 0..d {
                q_whiten[(i, j)] = col[i];
            }
        }
        Ok(GaussianTransition {
            a: a.clone(),
            q: q.clone(),
            q_factor: ch.into_l(),
            q_whiten,
        })
    }

    /// Appends a draw of `A x + L z` to `out` without intermediate buffers.
    pub fn sample_into(&self, x: &[f64], rng: &mut StreamRng, out: &mut Vec<f64>) {
        let d = x.len();
        let mut z = [0.0f64; 8];
        let z: &mut [f64] = if d <= z.len() {
            &mut z[..d]
        } else {
            out.extend(sample_with_factor(&self.a.matvec(x), &self.q_factor, rng));
            return;
        };
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let mut mean = 0.0;
            let mut noise = 0.0;
            for j in 0..d {
                mean += self.a[(i, j)] * x[j];
                noise += self.q_factor[(i, j)] * z[j];
            }
            out.push(mean + noise);
        }
    }
}

/// A state-space model the particle methods can run on.
pub trait Model: Sync {
    fn state_dim(&self) -> usize;
    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64>;
    fn transition(&self) -> &GaussianTransition;
    fn emission_log_density(&self, x: &[f64], y: &[f64]) -> Result<f64>;

    /// Appends a draw from the transition kernel at `x` to `out`.
    fn sample_transition(&self, x: &[f64], rng: &mut StreamRng, out: &mut Vec<f64>) {
        self.transition().sample_into(x, rng, out);
    }
}

fn gaussian_obs_logpdf(
    y: &[f64],
    mean: &[f64],
    r_chol: &crate::linalg::Cholesky,
    norm: f64,
) -> f64 {
    let resid: Vec<f64> = y.iter().zip(mean).map(|(a, b)| a - b).collect();
    norm - 0.5 * r_chol.quad_form(&resid)
}

/// Linear-Gaussian model as a particle-method target.
#[derive(Clone, Debug)]
pub struct LinearGaussianModel {
    pub params: LGParams,
    transition: GaussianTransition,
    q0_factor: Matrix,
    r_chol: crate::linalg::Cholesky,
    r_norm: f64,
}

impl LinearGaussianModel {
    pub fn new(params: &LGParams) -> Result<Self> {
        params.validate()?;
        let r_chol = params.r.cholesky()?;
        let r_norm = -0.5 * (r_chol.logdet() + crate::gauss::LN_2PI * params.obs_dim() as f64);
        Ok(LinearGaussianModel {
            params: params.clone(),
            transition: GaussianTransition::new(&params.a, &params.q)?,
            q0_factor: params.q0.cholesky()?.into_l(),
            r_chol,
            r_norm,
        })
    }
}

impl Model for LinearGaussianModel {
    fn state_dim(&self) -> usize {
        self.params.state_dim()
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64> {
        sample_with_factor(&self.params.a0, &self.q0_factor, rng)
    }

    fn transition(&self) -> &GaussianTransition {
        &self.transition
    }

    fn emission_log_density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if y.len() == 1 {
            // scalar observations skip the temporaries
            let b = &self.params.b;
            let mean: f64 = (0..x.len()).map(|j| b[(0, j)] * x[j]).sum();
            let w = (y[0] - mean) / self.r_chol.l()[(0, 0)];
            return Ok(self.r_norm - 0.5 * w * w);
        }
        Ok(gaussian_obs_logpdf(
            y,
            &self.params.b.matvec(x),
            &self.r_chol,
            self.r_norm,
        ))
    }
}

/// Linear dynamics with a nonlinear emission.
#[derive(Clone, Debug)]
pub struct NonlinearModel {
    pub dynamics: LGParams,
    pub emission: NonlinearEmission,
    transition: GaussianTransition,
    q0_factor: Matrix,
    r_chol: crate::linalg::Cholesky,
    r_norm: f64,
}

impl NonlinearModel {
    pub fn new(dynamics: &LGParams, emission: &NonlinearEmission) -> Result<Self> {
        dynamics.check_shapes()?;
        emission.validate(dynamics.state_dim())?;
        let r_chol = emission.r.cholesky()?;
        let r_norm = -0.5 * (r_chol.logdet() + crate::gauss::LN_2PI * emission.obs_dim() as f64);
        Ok(NonlinearModel {
            dynamics: dynamics.clone(),
            emission: emission.clone(),
            transition: GaussianTransition::new(&dynamics.a, &dynamics.q)?,
            q0_factor: dynamics.q0.cholesky()?.into_l(),
            r_chol,
            r_norm,
        })
    }
}

impl Model for NonlinearModel {
    fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64> {
        sample_with_factor(&self.dynamics.a0, &self.q0_factor, rng)
    }

    fn transition(&self) -> &GaussianTransition {
        &self.transition
    }

    fn emission_log_density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(gaussian_obs_logpdf(
            y,
            &self.emission.mean_f64(x)?,
            &self.r_chol,
            self.r_norm,
        ))
    }
}

/// Weighted particles at one time step (before resampling).
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub dim: usize,
    /// `N × d`, row-major.
    pub positions: Vec<f64>,
    /// Normalized so that `logsumexp = 0`.
    pub log_weights: Vec<f64>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        &self.positions[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Weighted mean of the particles.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (j, w) in self.weights().into_iter().enumerate() {
            for (mi, xi) in m.iter_mut().zip(self.particle(j)) {
                *mi += w * xi;
            }
        }
        m
    }
}

/// Output of the forward pass.
#[derive(Clone, Debug)]
pub struct ParticleFilterOutput {
    pub sets: Vec<ParticleSet>,
    /// Estimate of `log p(y_{0:n})`.
    pub loglik: f64,
}

fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// When the largest unnormalized log-weight falls below this, every particle
/// has an effectively zero likelihood.
pub const COLLAPSE_LOG_WEIGHT: f64 = -700.0;

fn normalize(step: usize, lw: &mut [f64]) -> Result<f64> {
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || max < COLLAPSE_LOG_WEIGHT {
        return Err(Error::WeightCollapse { step });
    }
    let lse = logsumexp(lw);
    if !lse.is_finite() {
        return Err(Error::WeightCollapse { step });
    }
    lw.iter_mut().for_each(|w| *w -= lse);
    Ok(lse)
}

/// Indices drawn by systematic resampling from normalized weights.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..n {
        let u = (u0 + i as f64) / n as f64;
        while u > cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// Bootstrap filter: propagate with the transition, weight with the emission,
/// systematic resampling at every step.
pub fn bootstrap_filter<M: Model + ?Sized>(
    model: &M,
    ys: &[Vec<f64>],
    n_particles: usize,
    seed: u64,
) -> Result<ParticleFilterOutput> {
    if n_particles == 0 {
        return Err(Error::InvalidArgument(
            "at least one particle is required".into(),
        ));
    }
    if ys.is_empty() {
        return Err(Error::LengthMismatch("no observations".into()));
    }
    let d = model.state_dim();
    let mut rng = stream_rng(seed, substream(0, 0xF1));
    let mut positions: Vec<f64> = (0..n_particles)
        .flat_map(|_| model.sample_initial(&mut rng))
        .collect();
    let mut sets = Vec::with_capacity(ys.len());
    let mut loglik = 0.0;
    for (k, y) in ys.iter().enumerate() {
        if k > 0 {
            let prev: &ParticleSet = sets.last().expect("previous step");
            let ancestors = systematic_resample(&prev.weights(), rng.random::<f64>());
            let mut next = Vec::with_capacity(n_particles * d);
            for a in ancestors {
                model.sample_transition(prev.particle(a), &mut rng, &mut next);
            }
            positions = next;
        }
        let mut lw = Vec::with_capacity(n_particles);
        for j in 0..n_particles {
            lw.push(model.emission_log_density(&positions[j * d..(j + 1) * d], y)?);
        }
        let lse = normalize(k, &mut lw)?;
        loglik += lse - (n_particles as f64).ln();
        sets.push(ParticleSet {
            dim: d,
            positions: std::mem::take(&mut positions),
            log_weights: lw,
        });
    }
    Ok(ParticleFilterOutput { sets, loglik })
}

/// `M` trajectories over `k = 0..=n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingSample {
    pub dim: usize,
    pub n_steps: usize,
    /// `[trajectory][k][coordinate]`, flattened.
    pub states: Vec<f64>,
}

impl SmoothingSample {
    pub fn n_trajectories(&self) -> usize {
        self.states.len() / (self.dim * self.n_steps)
    }

    pub fn state(&self, m: usize, k: usize) -> &[f64] {
        let off = (m * self.n_steps + k) * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn trajectory(&self, m: usize) -> Vec<Vec<f64>> {
        (0..self.n_steps)
            .map(|k| self.state(m, k).to_vec())
            .collect()
    }

    /// Sample mean of `x_k` for every `k`.
    pub fn marginal_means(&self) -> Vec<Vec<f64>> {
        let mm = self.n_trajectories() as f64;
        (0..self.n_steps)
            .map(|k| {
                let mut acc = vec![0.0; self.dim];
                for m in 0..self.n_trajectories() {
                    for (a, x) in acc.iter_mut().zip(self.state(m, k)) {
                        *a += x;
                    }
                }
                acc.iter().map(|a| a / mm).collect()
            })
            .collect()
    }

    /// Sample variance (denominator `M − 1`) of each coordinate of `x_k`.
    pub fn marginal_variances(&self) -> Vec<Vec<f64>> {
        let means = self.marginal_means();
        let mm = self.n_trajectories();
        (0..self.n_steps)
            .map(|k| {
                let mut acc = vec![0.0; self.dim];
                for m in 0..mm {
                    for ((a, x), mu) in acc.iter_mut().zip(self.state(m, k)).zip(&means[k]) {
                        *a += (x - mu).powi(2);
                    }
                }
                acc.iter().map(|a| a / (mm.max(2) - 1) as f64).collect()
            })
            .collect()
    }

    /// CSV rows `trajectory_id,k,x_0..x_{d-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["trajectory_id".to_string(), "k".to_string()];
        header.extend((0..self.dim).map(|i| format!("x_{i}")));
        wr.write_record(&header)?;
        for m in 0..self.n_trajectories() {
            for k in 0..self.n_steps {
                let mut row = vec![m.to_string(), k.to_string()];
                row.extend(self.state(m, k).iter().map(|v| fmt_f64(*v)));
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Unnormalized backward log-weights `log w_j − ½‖L⁻¹(x' − A x_j)‖²`.
fn backward_log_weights(
    set: &ParticleSet,
    whitened_means: &[f64],
    whitened_next: &[f64],
    out: &mut [f64],
) {
    let d = set.dim;
    if d == 1 {
        let z = whitened_next[0];
        for ((o, &lw), &m) in out.iter_mut().zip(&set.log_weights).zip(whitened_means) {
            let r = z - m;
            *o = lw - 0.5 * r * r;
        }
    } else {
        for (j, o) in out.iter_mut().enumerate() {
            let m = &whitened_means[j * d..(j + 1) * d];
            let sq: f64 = m
                .iter()
                .zip(whitened_next)
                .map(|(a, b)| (b - a) * (b - a))
                .sum();
            *o = set.log_weights[j] - 0.5 * sq;
        }
    }
}

/// Cumulative weights (unnormalized) from log-weights.
fn cumulative(log_w: &[f64], out: &mut Vec<f64>) {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    let mut acc = 0.0;
    for &l in log_w {
        acc += (l - max).exp();
        out.push(acc);
    }
}

fn search(cum: &[f64], u: f64) -> usize {
    let target = u * cum[cum.len() - 1];
    cum.partition_point(|&c| c <= target).min(cum.len() - 1)
}

/// Proposals tried per backward draw before falling back to the full
/// `O(N)` categorical pass.
const REJECTION_TRIES: usize = 32;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Backward simulation of `M` trajectories with exact categorical draws.
///
/// Each draw first tries rejection sampling (propose from the filter
/// weights, accept with the transition density over its maximum) and falls
/// back to the full categorical after `REJECTION_TRIES` misses, so the
/// sampled index has the exact backward-kernel law either way. Every
/// trajectory owns its random stream, so the output does not depend on the
/// thread count.
pub fn ffbsi<M: Model + ?Sized>(
    model: &M,
    filter: &ParticleFilterOutput,
    n_trajectories: usize,
    seed: u64,
) -> Result<SmoothingSample> {
    if n_trajectories == 0 {
        return Err(Error::InvalidArgument(
            "at least one trajectory is required".into(),
        ));
    }
    let sets = &filter.sets;
    let n_steps = sets.len();
    if n_steps == 0 {
        return Err(Error::LengthMismatch("empty filter output".into()));
    }
    let d = sets[0].dim;
    let t = model.transition();
    let whiten_a = t.q_whiten.matmul(&t.a);
    let mut rngs: Vec<StreamRng> = (0..n_trajectories)
        .map(|m| stream_rng(seed, substream(m as u64, 0xFB)))
        .collect();
    let mut idx = vec![0usize; n_trajectories];
    let mut path_idx = vec![vec![0usize; n_steps]; n_trajectories];
    let mut cum = Vec::new();
    cumulative(&sets[n_steps - 1].log_weights, &mut cum);
    if !cum[cum.len() - 1].is_finite() {
        return Err(Error::WeightCollapse { step: n_steps - 1 });
    }
    for (m, rng) in rngs.iter_mut().enumerate() {
        idx[m] = search(&cum, rng.random::<f64>());
        path_idx[m][n_steps - 1] = idx[m];
    }
    for k in (0..n_steps - 1).rev() {
        let set = &sets[k];
        let next_set = &sets[k + 1];
        let mut whitened_means = Vec::with_capacity(set.len() * d);
        for j in 0..set.len() {
            let x = set.particle(j);
            whitened_means
                .extend((0..d).map(|i| (0..d).map(|l| whiten_a[(i, l)] * x[l]).sum::<f64>()));
        }
        cumulative(&set.log_weights, &mut cum);
        let proposal = &cum;
        let draws: Vec<Result<usize>> = rngs
            .par_iter_mut()
            .zip(idx.par_iter())
            .map(|(rng, &next_i)| {
                let z = t.q_whiten.matvec(next_set.particle(next_i));
                for _ in 0..REJECTION_TRIES {
                    let j = search(proposal, rng.random::<f64>());
                    let sq = squared_distance(&z, &whitened_means[j * d..(j + 1) * d]);
                    if rng.random::<f64>() < (-0.5 * sq).exp() {
                        return Ok(j);
                    }
                }
                let mut lw = vec![0.0; set.len()];
                backward_log_weights(set, &whitened_means, &z, &mut lw);
                let mut exact = Vec::with_capacity(set.len());
                cumulative(&lw, &mut exact);
                let total = exact[exact.len() - 1];
                if !(total.is_finite() && total > 0.0) {
                    return Err(Error::WeightCollapse { step: k });
                }
                Ok(search(&exact, rng.random::<f64>()))
            })
            .collect();
        for (m, j) in draws.into_iter().enumerate() {
            let j = j?;
            idx[m] = j;
            path_idx[m][k] = j;
        }
    }
    let mut states = Vec::with_capacity(n_trajectories * n_steps * d);
    for path in &path_idx {
        for (k, &j) in path.iter().enumerate() {
            states.extend_from_slice(sets[k].particle(j));
        }
    }
    Ok(SmoothingSample {
        dim: d,
        n_steps,
        states,
    })
}

/// Filter plus backward simulation repeated with independent seeds, for
/// batch-means error bars that include particle-filter noise.
pub fn ffbsi_replicates<M: Model + ?Sized>(
    model: &M,
    ys: &[Vec<f64>],
    n_particles: usize,
    n_trajectories: usize,
    n_replicates: usize,
    seed: u64,
) -> Result<Vec<SmoothingSample>> {
    (0..n_replicates)
        .into_par_iter()
        .map(|r| {
            let rep_seed = substream(seed, r as u64);
            let pf = bootstrap_filter(model, ys, n_particles, rep_seed)?;
            ffbsi(model, &pf, n_trajectories, rep_seed)
        })
        .collect()
}

/// Mean and standard error across replicates of a per-replicate estimate.
pub fn batch_mean(estimates: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = estimates.len();
    if r < 2 {
        return Err(Error::InvalidArgument(
            "batch means need at least 2 replicates".into(),
        ));
    }
    let dim = estimates[0].len();
    let mut mean = vec![0.0; dim];
    for e in estimates {
        if e.len() != dim {
            return Err(Error::LengthMismatch(
                "replicate estimates differ in length".into(),
            ));
        }
        for (a, x) in mean.iter_mut().zip(e) {
            *a += x / r as f64;
        }
    }
    let mut var = vec![0.0; dim];
    for e in estimates {
        for ((a, x), mu) in var.iter_mut().zip(e).zip(&mean) {
            *a += (x - mu).powi(2) / (r - 1) as f64;
        }
    }
    Ok((mean, var.iter().map(|v| (v / r as f64).sqrt()).collect()))
}

/// Trajectory-wise additive functional: sample mean and standard error.
pub fn ffbsi_additive(
    sample: &SmoothingSample,
    f: &AdditiveFunctional,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mm = sample.n_trajectories();
    if mm < 2 {
        return Err(Error::InvalidArgument(
            "standard errors need at least 2 trajectories".into(),
        ));
    }
    let values: Vec<Vec<f64>> = (0..mm)
        .map(|m| eval_additive(&sample.trajectory(m), f))
        .collect::<Result<_>>()?;
    let dim = f.out_dim();
    let mut mean = vec![0.0; dim];
    for v in &values {
        for (a, x) in mean.iter_mut().zip(v) {
            *a += x / mm as f64;
        }
    }
    let mut var = vec![0.0; dim];
    for v in &values {
        for ((a, x), mu) in var.iter_mut().zip(v).zip(&mean) {
            *a += (x - mu).powi(2) / (mm - 1) as f64;
        }
    }
    let stderr = var.iter().map(|v| (v / mm as f64).sqrt()).collect();
    Ok((mean, stderr))
}
