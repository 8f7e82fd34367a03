//! Finite-state hidden Markov models, where filtering, backward kernels,
//! smoothing and every constant of the additive-error bound are exact.
//!
//! Tables are nested `Vec<Vec<f64>>`. Backward kernels are indexed
//! `[x_k][x_{k-1}]`, one-step tables `[x_k][x_{k+1}]`.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, substream, StreamRng};
use crate::ssm::AdditiveFunctional;
use crate::variational::{additive_bound_rhs, linear_growth_bound};

pub type Table = Vec<Vec<f64>>;

/// Tolerance on row sums of probability vectors and tables.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Arithmetic slack allowed when comparing the two sides of the bound.
pub const BOUND_SLACK: f64 = 1e-10;

/// Smallest probability kept after random generation, so every entry stays
/// strictly positive.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}")));
    }
    Ok(())
}

fn check_positive_table(t: &Table, s: usize, what: &str) -> Result<()> {
    if t.len() != s || t.iter().any(|r| r.len() != s) {
        return Err(Error::DimMismatch(format!("{what} must be {s}x{s}")));
    }
    for (i, row) in t.iter().enumerate() {
        check_distribution(row, &format!("{what} row {i}"))?;
        if row.iter().any(|v| *v <= 0.0) {
            return Err(Error::DegenerateModel(format!(
                "{what} row {i} has a zero entry"
            )));
        }
    }
    Ok(())
}

fn normalize(v: &mut [f64]) -> f64 {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    s
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// HMM with strictly positive transitions and a fixed observation sequence,
/// stored as per-step emission log-likelihoods `log g_k(x, y_k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteHMM {
    pub init: Vec<f64>,
    pub trans: Table,
    pub emis_loglik: Vec<Vec<f64>>,
}

impl DiscreteHMM {
    pub fn new(init: Vec<f64>, trans: Table, emis_loglik: Vec<Vec<f64>>) -> Result<Self> {
        let m = DiscreteHMM {
            init,
            trans,
            emis_loglik,
        };
        m.validate()?;
        Ok(m)
    }

    /// Emission log-likelihoods read off an `S × O` emission matrix.
    pub fn from_emission_matrix(
        init: Vec<f64>,
        trans: Table,
        emission: &Table,
        ys: &[usize],
    ) -> Result<Self> {
        let s = init.len();
        if emission.len() != s {
            return Err(Error::DimMismatch(format!(
                "emission matrix needs {s} rows"
            )));
        }
        let mut emis_loglik = Vec::with_capacity(ys.len());
        for &y in ys {
            let col: Vec<f64> = emission
                .iter()
                .map(|row| row.get(y).map(|p| p.ln()))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::InvalidArgument(format!("observation {y} out of range")))?;
            emis_loglik.push(col);
        }
        DiscreteHMM::new(init, trans, emis_loglik)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.init.len();
        if s == 0 {
            return Err(Error::InvalidArgument("no states".into()));
        }
        check_distribution(&self.init, "initial distribution")?;
        check_positive_table(&self.trans, s, "transition matrix")?;
        if self.emis_loglik.is_empty() {
            return Err(Error::LengthMismatch("no observations".into()));
        }
        for (k, e) in self.emis_loglik.iter().enumerate() {
            if e.len() != s {
                return Err(Error::DimMismatch(format!(
                    "emission log-likelihoods at step {k}"
                )));
            }
            if e.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::NonFiniteValue(format!(
                    "emission log-likelihood at step {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.init.len()
    }

    /// Index of the last observation.
    pub fn n(&self) -> usize {
        self.emis_loglik.len() - 1
    }

    pub fn emission(&self, k: usize) -> Vec<f64> {
        self.emis_loglik[k].iter().map(|l| l.exp()).collect()
    }

    /// The model restricted to observations `0..=n`.
    pub fn prefix(&self, n: usize) -> DiscreteHMM {
        DiscreteHMM {
            init: self.init.clone(),
            trans: self.trans.clone(),
            emis_loglik: self.emis_loglik[..=n].to_vec(),
        }
    }

    /// Unnormalized one-step table `trans(x_k, x_{k+1}) g_{k+1}(x_{k+1})`.
    pub fn step_table(&self, k: usize) -> Table {
        let g = self.emission(k + 1);
        self.trans
            .iter()
            .map(|row| row.iter().zip(&g).map(|(t, e)| t * e).collect())
            .collect()
    }
}

/// Backward-factorized distribution over paths: a terminal law and kernels
/// `kernels[k - 1][x_k][x_{k-1}]` for `k = 1..=n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteBackwardVariational {
    pub terminal: Vec<f64>,
    pub kernels: Vec<Table>,
}

/// Marginals and pair marginals `pairs[k][x_k][x_{k+1}]` of a path law.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSmoothed {
    pub marginals: Vec<Vec<f64>>,
    pub pairs: Vec<Table>,
}

impl DiscreteBackwardVariational {
    pub fn n(&self) -> usize {
        self.kernels.len()
    }

    pub fn validate(&self, s: usize) -> Result<()> {
        if self.terminal.len() != s {
            return Err(Error::DimMismatch(format!(
                "terminal law needs {s} entries"
            )));
        }
        check_distribution(&self.terminal, "terminal law")?;
        for (k, t) in self.kernels.iter().enumerate() {
            check_positive_table(t, s, &format!("backward kernel {}", k + 1))?;
        }
        Ok(())
    }

    pub fn smoothed(&self) -> DiscreteSmoothed {
        let n = self.n();
        let s = self.terminal.len();
        let mut marginals = vec![Vec::new(); n + 1];
        let mut pairs = vec![Vec::new(); n];
        marginals[n] = self.terminal.clone();
        for k in (1..=n).rev() {
            let kernel = &self.kernels[k - 1];
            let mut pair = vec![vec![0.0; s]; s];
            let mut prev = vec![0.0; s];
            for (xk, row) in kernel.iter().enumerate() {
                for (xp, b) in row.iter().enumerate() {
                    let p = marginals[k][xk] * b;
                    pair[xp][xk] = p;
                    prev[xp] += p;
                }
            }
            marginals[k - 1] = prev;
            pairs[k - 1] = pair;
        }
        DiscreteSmoothed { marginals, pairs }
    }
}

/// Exact filtering and smoothing of a [`DiscreteHMM`].
#[derive(Clone, Debug)]
pub struct ExactSmoothing {
    pub filters: Vec<Vec<f64>>,
    /// The true backward factorization (terminal = last filter).
    pub backward: DiscreteBackwardVariational,
    pub smoothed: DiscreteSmoothed,
    pub loglik: f64,
}

/// Kernel with rows `B(x_k, ·) ∝ trans(·, x_k) filter(·)`.
pub fn backward_kernel(filter: &[f64], trans: &Table) -> Table {
    let s = filter.len();
    (0..s)
        .map(|xk| {
            let mut row: Vec<f64> = (0..s).map(|xp| trans[xp][xk] * filter[xp]).collect();
            normalize(&mut row);
            row
        })
        .collect()
}

pub fn dhmm_filter_smooth(model: &DiscreteHMM) -> Result<ExactSmoothing> {
    model.validate()?;
    let s = model.n_states();
    let mut filters: Vec<Vec<f64>> = Vec::with_capacity(model.n() + 1);
    let mut loglik = 0.0;
    for k in 0..=model.n() {
        let g = model.emission(k);
        let mut f: Vec<f64> = if k == 0 {
            model.init.iter().zip(&g).map(|(p, e)| p * e).collect()
        } else {
            let prev = &filters[k - 1];
            (0..s)
                .map(|j| (0..s).map(|i| prev[i] * model.trans[i][j]).sum::<f64>() * g[j])
                .collect()
        };
        let z = normalize(&mut f);
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::DegenerateModel(format!(
                "observation {k} has zero likelihood"
            )));
        }
        loglik += z.ln();
        filters.push(f);
    }
    let kernels = (1..=model.n())
        .map(|k| backward_kernel(&filters[k - 1], &model.trans))
        .collect();
    let backward = DiscreteBackwardVariational {
        terminal: filters[model.n()].clone(),
        kernels,
    };
    let smoothed = backward.smoothed();
    Ok(ExactSmoothing {
        filters,
        backward,
        smoothed,
        loglik,
    })
}

/// Scalar additive functional `Σ_{k<n} h̃_k(x_k, x_{k+1})` as tables
/// `tables[k][x_k][x_{k+1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteFunctional {
    pub tables: Vec<Table>,
}

impl DiscreteFunctional {
    /// `h̃_k(x, x') = values[x]` for every `k < n`.
    pub fn state_sum(values: &[f64], n: usize) -> Self {
        let table: Table = values.iter().map(|v| vec![*v; values.len()]).collect();
        DiscreteFunctional {
            tables: vec![table; n],
        }
    }

    /// Only step `k` is nonzero, with `h̃_k(x, x') = values[x]`.
    pub fn marginal(values: &[f64], k: usize, n: usize) -> Self {
        let mut f = DiscreteFunctional::state_sum(values, n);
        for (j, t) in f.tables.iter_mut().enumerate() {
            if j != k {
                t.iter_mut()
                    .for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
            }
        }
        f
    }

    /// Tabulates a scalar [`AdditiveFunctional`] with state `i` embedded as
    /// the one-dimensional point `values[i]`.
    pub fn from_additive(f: &AdditiveFunctional, values: &[f64], n: usize) -> Result<Self> {
        if f.out_dim() != 1 {
            return Err(Error::DimMismatch("discrete functionals are scalar".into()));
        }
        let mut tables = Vec::with_capacity(n);
        for k in 0..n {
            let mut t = vec![vec![0.0; values.len()]; values.len()];
            if f.active(k) {
                for (i, xi) in values.iter().enumerate() {
                    for (j, xj) in values.iter().enumerate() {
                        t[i][j] = f.term.eval(&[*xi], &[*xj])?[0];
                    }
                }
            }
            tables.push(t);
        }
        Ok(DiscreteFunctional { tables })
    }

    pub fn n(&self) -> usize {
        self.tables.len()
    }

    /// `‖h̃_k‖∞` for each step.
    pub fn h_inf(&self) -> Vec<f64> {
        self.tables
            .iter()
            .map(|t| t.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())))
            .collect()
    }

    pub fn expect(&self, sm: &DiscreteSmoothed) -> Result<f64> {
        if sm.pairs.len() != self.n() {
            return Err(Error::LengthMismatch(format!(
                "functional over {} steps, distribution over {}",
                self.n(),
                sm.pairs.len()
            )));
        }
        Ok(self
            .tables
            .iter()
            .zip(&sm.pairs)
            .map(|(h, p)| {
                h.iter()
                    .flatten()
                    .zip(p.iter().flatten())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum())
    }
}

/// Choice of the intermediate laws `ρ̂_k`. Both end with `ρ̂_n = q_n`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoChoice {
    /// True filters for `k < n`.
    #[default]
    TrueFilters,
    /// Marginals of the variational path law, propagated backwards from `q_n`.
    VariationalMarginals,
}

pub fn rho_hats(
    q: &DiscreteBackwardVariational,
    exact: &ExactSmoothing,
    choice: RhoChoice,
) -> Vec<Vec<f64>> {
    let mut rho = match choice {
        RhoChoice::TrueFilters => exact.filters.clone(),
        RhoChoice::VariationalMarginals => q.smoothed().marginals,
    };
    let n = q.n();
    rho[n] = q.terminal.clone();
    rho
}

/// Constants `c_k`: the exact `sup_{‖h‖∞ ≤ 1}` gap, i.e. the L1 distance
/// (twice the total variation) between `ρ̂_k ⊗ q_{k-1|k}` and the normalized
/// `ρ̂_{k-1}(x) ℓ_{k-1}(x, x')`; `c_0` compares `ρ̂_0` with the first filter.
pub fn dhmm_ck(
    model: &DiscreteHMM,
    q: &DiscreteBackwardVariational,
    rho_hats: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let n = model.n();
    let s = model.n_states();
    q.validate(s)?;
    if q.n() != n || rho_hats.len() != n + 1 {
        return Err(Error::LengthMismatch(format!(
            "model has {} steps, family {}, intermediate laws {}",
            n + 1,
            q.n() + 1,
            rho_hats.len()
        )));
    }
    for (k, r) in rho_hats.iter().enumerate() {
        if r.len() != s {
            return Err(Error::DimMismatch(format!("intermediate law {k}")));
        }
        check_distribution(r, &format!("intermediate law {k}"))?;
    }
    if l1(&rho_hats[n], &q.terminal) > STOCHASTIC_TOL {
        return Err(Error::InvalidArgument(
            "last intermediate law must equal the terminal law".into(),
        ));
    }
    let exact = dhmm_filter_smooth(model)?;
    let mut ck = Vec::with_capacity(n + 1);
    ck.push(l1(&rho_hats[0], &exact.filters[0]));
    for k in 1..=n {
        let table = model.step_table(k - 1);
        let mut target: Vec<f64> = Vec::with_capacity(s * s);
        for xp in 0..s {
            for xk in 0..s {
                target.push(rho_hats[k - 1][xp] * table[xp][xk]);
            }
        }
        let z = normalize(&mut target);
        if !(z > 0.0) {
            return Err(Error::DegenerateModel(format!("step {k} has zero mass")));
        }
        let mut gap = 0.0;
        for xp in 0..s {
            for xk in 0..s {
                let joint = rho_hats[k][xk] * q.kernels[k - 1][xk][xp];
                gap += (joint - target[xp * s + xk]).abs();
            }
        }
        ck.push(gap);
    }
    Ok(ck)
}

/// Mixing constants: extremes over every one-step table entry and every
/// variational kernel entry.
pub fn dhmm_sigma(model: &DiscreteHMM, q: &DiscreteBackwardVariational) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut visit = |v: f64| {
        lo = lo.min(v);
        hi = hi.max(v);
    };
    for k in 0..model.n() {
        model.step_table(k).iter().flatten().for_each(|v| visit(*v));
    }
    q.kernels.iter().flatten().flatten().for_each(|v| visit(*v));
    if !(lo > 0.0) || !lo.is_finite() {
        return Err(Error::DegenerateModel(format!(
            "mixing lower bound is {lo}"
        )));
    }
    Ok((lo, hi))
}

/// One evaluation of both sides of the additive-error bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub sigma_minus: f64,
    pub sigma_plus: f64,
    pub rho: f64,
    pub ck: Vec<f64>,
}

pub fn dhmm_bound_check(
    model: &DiscreteHMM,
    q: &DiscreteBackwardVariational,
    rho_hats: &[Vec<f64>],
    f: &DiscreteFunctional,
) -> Result<BoundCheck> {
    if f.n() != model.n() {
        return Err(Error::LengthMismatch(
            "functional and model lengths differ".into(),
        ));
    }
    let exact = dhmm_filter_smooth(model)?;
    let ck = dhmm_ck(model, q, rho_hats)?;
    let (sigma_minus, sigma_plus) = dhmm_sigma(model, q)?;
    let lhs = (f.expect(&q.smoothed())? - f.expect(&exact.smoothed)?).abs();
    let rhs = if model.n() == 0 {
        0.0
    } else {
        additive_bound_rhs(&ck, sigma_minus, sigma_plus, &f.h_inf())?
    };
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + BOUND_SLACK,
        sigma_minus,
        sigma_plus,
        rho: 1.0 - sigma_minus / sigma_plus,
        ck,
    })
}

/// Dirichlet draw with concentration `kappa · p`, floored at
/// [`PROB_FLOOR`]; `kappa = ∞` returns `p`.
pub fn dirichlet_jitter(p: &[f64], kappa: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    if kappa == f64::INFINITY {
        return Ok(p.to_vec());
    }
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "concentration must be positive, got {kappa}"
        )));
    }
    let mut out = Vec::with_capacity(p.len());
    for &pi in p {
        let g = Gamma::new(kappa * pi, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.push(g.sample(rng));
    }
    let s: f64 = out.iter().sum();
    if !(s > 0.0) {
        // every coordinate underflowed: fall back to the mode of the draw's support
        out.clone_from_slice(p);
    } else {
        out.iter_mut().for_each(|v| *v /= s);
    }
    out.iter_mut().for_each(|v| *v = v.max(PROB_FLOOR));
    normalize(&mut out);
    Ok(out)
}

fn dirichlet_uniform(s: usize, alpha: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    dirichlet_jitter(&vec![1.0 / s as f64; s], alpha * s as f64, rng)
}

const TERMINAL_LABEL: u64 = 0x7E7;

/// Perturbs each kernel row and the terminal law. Kernel `k` draws from its
/// own stream, so a prefix of a longer sequence gets the same kernels.
pub fn jitter_family(
    exact: &DiscreteBackwardVariational,
    kappa: f64,
    seed: u64,
    stream: u64,
) -> Result<DiscreteBackwardVariational> {
    let n = exact.n();
    let mut kernels = Vec::with_capacity(n);
    for (k, kernel) in exact.kernels.iter().enumerate() {
        let mut rng = stream_rng(seed, substream(stream, k as u64 + 1));
        kernels.push(
            kernel
                .iter()
                .map(|row| dirichlet_jitter(row, kappa, &mut rng))
                .collect::<Result<Table>>()?,
        );
    }
    let mut rng = stream_rng(seed, substream(substream(stream, TERMINAL_LABEL), n as u64));
    let terminal = dirichlet_jitter(&exact.terminal, kappa, &mut rng)?;
    Ok(DiscreteBackwardVariational { terminal, kernels })
}

/// Randomly generated model with an observation sequence drawn from it.
#[derive(Clone, Debug)]
pub struct RandomHMM {
    pub model: DiscreteHMM,
    pub states: Vec<usize>,
    pub observations: Vec<usize>,
}

/// Dirichlet concentration per coordinate for random models.
pub const RANDOM_MODEL_ALPHA: f64 = 2.0;

fn draw_index(p: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// `S` states, `n_obs` observation symbols, observations `0..=n`.
pub fn random_hmm(s: usize, n_obs: usize, n: usize, seed: u64, stream: u64) -> Result<RandomHMM> {
    if s == 0 || n_obs == 0 {
        return Err(Error::InvalidArgument(
            "need at least one state and one symbol".into(),
        ));
    }
    let mut rng = stream_rng(seed, stream);
    let init = dirichlet_uniform(s, RANDOM_MODEL_ALPHA, &mut rng)?;
    let trans: Table = (0..s)
        .map(|_| dirichlet_uniform(s, RANDOM_MODEL_ALPHA, &mut rng))
        .collect::<Result<_>>()?;
    let emission: Table = (0..s)
        .map(|_| dirichlet_uniform(n_obs, RANDOM_MODEL_ALPHA, &mut rng))
        .collect::<Result<_>>()?;
    let mut states: Vec<usize> = Vec::with_capacity(n + 1);
    let mut observations = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let x = if k == 0 {
            draw_index(&init, &mut rng)
        } else {
            draw_index(&trans[states[k - 1]], &mut rng)
        };
        states.push(x);
        observations.push(draw_index(&emission[x], &mut rng));
    }
    let model = DiscreteHMM::from_emission_matrix(init, trans, &emission, &observations)?;
    Ok(RandomHMM {
        model,
        states,
        observations,
    })
}

/// Which functional an instance is checked against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKind {
    /// `h̃_k(x, x') = x` with states labelled `0..S`.
    #[default]
    StateSum,
    /// Independent uniform `[-1, 1]` tables per step.
    RandomTables,
}

pub fn make_functional(
    kind: FunctionalKind,
    s: usize,
    n: usize,
    seed: u64,
    stream: u64,
) -> DiscreteFunctional {
    match kind {
        FunctionalKind::StateSum => {
            let labels: Vec<f64> = (0..s).map(|i| i as f64).collect();
            DiscreteFunctional::state_sum(&labels, n)
        }
        FunctionalKind::RandomTables => {
            let mut rng = stream_rng(seed, substream(stream, 0xF7));
            let tables = (0..n)
                .map(|_| {
                    (0..s)
                        .map(|_| (0..s).map(|_| rng.random_range(-1.0..=1.0)).collect())
                        .collect()
                })
                .collect();
            DiscreteFunctional { tables }
        }
    }
}

/// One row of the verifier report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierRow {
    pub instance_id: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub n: usize,
    pub kappa: f64,
    pub sigma_minus: f64,
    pub sigma_plus: f64,
    pub rho: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Parameters of one randomized instance.
#[derive(Clone, Copy, Debug)]
pub struct InstanceSpec {
    pub s: usize,
    pub n_obs: usize,
    pub n: usize,
    pub kappa: f64,
    pub functional: FunctionalKind,
    pub rho: RhoChoice,
}

pub fn verify_instance(id: usize, spec: &InstanceSpec, seed: u64) -> Result<VerifierRow> {
    let stream = id as u64;
    let hmm = random_hmm(spec.s, spec.n_obs, spec.n, seed, stream)?;
    let exact = dhmm_filter_smooth(&hmm.model)?;
    let q = jitter_family(&exact.backward, spec.kappa, seed, substream(stream, 0x9A))?;
    let rho = rho_hats(&q, &exact, spec.rho);
    let f = make_functional(spec.functional, spec.s, spec.n, seed, stream);
    let check = dhmm_bound_check(&hmm.model, &q, &rho, &f)?;
    Ok(VerifierRow {
        instance_id: id,
        s: spec.s,
        n: spec.n,
        kappa: spec.kappa,
        sigma_minus: check.sigma_minus,
        sigma_plus: check.sigma_plus,
        rho: check.rho,
        lhs: check.lhs,
        rhs: check.rhs,
        holds: check.holds,
    })
}

mod kappa_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Kappa {
        Finite(f64),
        Named(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|k| {
                if k.is_infinite() {
                    Kappa::Named("inf".into())
                } else {
                    Kappa::Finite(*k)
                }
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Kappa>::deserialize(d)?
            .into_iter()
            .map(|k| match k {
                Kappa::Finite(v) => Ok(v),
                Kappa::Named(s) if s == "inf" => Ok(f64::INFINITY),
                Kappa::Named(s) => Err(serde::de::Error::custom(format!("unknown kappa {s:?}"))),
            })
            .collect()
    }
}

fn default_kappas() -> Vec<f64> {
    vec![1.0, 10.0, 100.0, 1000.0]
}

/// Randomized instance grid: `S` uniform in `2..=max_states`, `n` uniform in
/// `1..=max_n`, concentration cycling through `kappas`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub instances: usize,
    pub max_states: usize,
    pub max_n: usize,
    pub n_obs: usize,
    /// Numbers, or the string `"inf"` for the unperturbed family.
    #[serde(with = "kappa_list")]
    pub kappas: Vec<f64>,
    pub functional: FunctionalKind,
    pub rho: RhoChoice,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            instances: 200,
            max_states: 4,
            max_n: 30,
            n_obs: 3,
            kappas: default_kappas(),
            functional: FunctionalKind::StateSum,
            rho: RhoChoice::TrueFilters,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.instances < 1 || self.max_states < 2 || self.max_n < 1 || self.n_obs < 1 {
            return Err(Error::InvalidConfig(
                "grid needs instances >= 1, max_states >= 2, max_n >= 1 and n_obs >= 1".into(),
            ));
        }
        if self.kappas.is_empty() || self.kappas.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::InvalidConfig(
                "kappas must be a nonempty list of positive values".into(),
            ));
        }
        Ok(())
    }

    pub fn instances(&self, seed: u64) -> Result<Vec<InstanceSpec>> {
        self.validate()?;
        let mut rng = stream_rng(seed, 0x6D1D);
        Ok((0..self.instances)
            .map(|i| InstanceSpec {
                s: rng.random_range(2..=self.max_states),
                n_obs: self.n_obs,
                n: rng.random_range(1..=self.max_n),
                kappa: self.kappas[i % self.kappas.len()],
                functional: self.functional,
                rho: self.rho,
            })
            .collect())
    }
}

/// Bound quantities at one horizon of a growth sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthPoint {
    pub n: usize,
    /// Error on the state-sum functional and its bound.
    pub lhs: f64,
    pub rhs: f64,
    /// The linear envelope `4 (σ+/σ−)(1 + ρ/(1−ρ)) c₊ h∞ n`.
    pub linear_bound: f64,
    /// Error on a single-step functional and its time-uniform envelope.
    pub marginal_lhs: f64,
    pub marginal_bound: f64,
}

/// Error growth along prefixes of one sequence with a fixed perturbation.
/// The marginal functional is nonzero at step `marginal_step` only.
pub fn growth_sweep(
    hmm: &DiscreteHMM,
    kappa: f64,
    ns: &[usize],
    marginal_step: usize,
    seed: u64,
) -> Result<Vec<GrowthPoint>> {
    let full = dhmm_filter_smooth(hmm)?;
    let s = hmm.n_states();
    let labels: Vec<f64> = (0..s).map(|i| i as f64).collect();
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        if n > hmm.n() || marginal_step >= n {
            return Err(Error::InvalidArgument(format!(
                "horizon {n} needs marginal step {marginal_step} < n <= {}",
                hmm.n()
            )));
        }
        let model = hmm.prefix(n);
        let exact_n = DiscreteBackwardVariational {
            terminal: full.filters[n].clone(),
            kernels: full.backward.kernels[..n].to_vec(),
        };
        let q = jitter_family(&exact_n, kappa, seed, 0)?;
        let exact = dhmm_filter_smooth(&model)?;
        let rho = rho_hats(&q, &exact, RhoChoice::TrueFilters);
        let sum = dhmm_bound_check(&model, &q, &rho, &DiscreteFunctional::state_sum(&labels, n))?;
        let marginal = DiscreteFunctional::marginal(&labels, marginal_step, n);
        let marginal_lhs =
            (marginal.expect(&q.smoothed())? - marginal.expect(&exact.smoothed)?).abs();
        let c_plus = sum.ck.iter().cloned().fold(0.0, f64::max);
        let h_inf = (s - 1) as f64;
        let linear_bound = linear_growth_bound(c_plus, sum.sigma_minus, sum.sigma_plus, h_inf, n);
        out.push(GrowthPoint {
            n,
            lhs: sum.lhs,
            rhs: sum.rhs,
            linear_bound,
            marginal_lhs,
            marginal_bound: linear_bound / n as f64,
        });
    }
    Ok(out)
}

/// Least-squares slope of `y` against `x`.
pub fn fitted_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
