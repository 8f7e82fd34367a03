//! Model definitions, simulation, trajectories and additive functionals.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::amortized::mlp::Mlp;
use crate::error::{Error, Result};
use crate::gauss::Gaussian;
use crate::linalg::{dot, lift_vec, vadd, Matrix};
use crate::optim::ParamVector;
use crate::rng::{stream_rng, StreamRng};
use crate::scalar::Real;

/// Linear-Gaussian model `x₀ ~ N(a0, q0)`, `x_{k+1} ~ N(A x_k, Q)`, `y_k ~ N(B x_k, R)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LGParams<T = f64> {
    pub a0: Vec<T>,
    pub q0: Matrix<T>,
    pub a: Matrix<T>,
    pub q: Matrix<T>,
    pub b: Matrix<T>,
    pub r: Matrix<T>,
}

#[derive(Serialize, Deserialize)]
struct LGRepr {
    a0: Vec<f64>,
    q0: Matrix<f64>,
    a: Matrix<f64>,
    q: Matrix<f64>,
    b: Matrix<f64>,
    r: Matrix<f64>,
}

impl Serialize for LGParams<f64> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LGRepr {
            a0: self.a0.clone(),
            q0: self.q0.clone(),
            a: self.a.clone(),
            q: self.q.clone(),
            b: self.b.clone(),
            r: self.r.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LGParams<f64> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = LGRepr::deserialize(d)?;
        let p = LGParams {
            a0: r.a0,
            q0: r.q0,
            a: r.a,
            q: r.q,
            b: r.b,
            r: r.r,
        };
        p.check_shapes().map_err(serde::de::Error::custom)?;
        Ok(p)
    }
}

impl LGParams<f64> {
    /// Scalar model with the given coefficients.
    pub fn scalar(a0: f64, q0: f64, a: f64, q: f64, b: f64, r: f64) -> Self {
        let m = |v: f64| Matrix::from_rows(&[&[v]]);
        LGParams {
            a0: vec![a0],
            q0: m(q0),
            a: m(a),
            q: m(q),
            b: m(b),
            r: m(r),
        }
    }

    pub fn lift<T: Real>(&self) -> LGParams<T> {
        LGParams {
            a0: lift_vec(&self.a0),
            q0: self.q0.lift(),
            a: self.a.lift(),
            q: self.q.lift(),
            b: self.b.lift(),
            r: self.r.lift(),
        }
    }

    /// Shape checks plus positive-definiteness of `q0`, `q`, `r`.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        for (name, m) in [("q0", &self.q0), ("q", &self.q), ("r", &self.r)] {
            if !m.is_finite() || m.max_asymmetry() > 1e-10 * m.max_abs().max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and symmetric"
                )));
            }
            m.cholesky()
                .map_err(|_| Error::not_pd(format!("{name} covariance")))?;
        }
        if !self.a0.iter().all(|v| v.is_finite()) || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::InvalidArgument(
                "non-finite model coefficients".into(),
            ));
        }
        Ok(())
    }
}

impl LGParams<f64> {
    /// Flat parameters with covariances in log-Cholesky coordinates.
    pub fn to_params(&self) -> Result<ParamVector> {
        let mut pv = ParamVector::new();
        pv.push_vector("a0", &self.a0)?;
        pv.push_spd("q0", &self.q0)?;
        pv.push_matrix("a", &self.a)?;
        pv.push_spd("q", &self.q)?;
        pv.push_matrix("b", &self.b)?;
        pv.push_spd("r", &self.r)?;
        Ok(pv)
    }
}

impl<T: Real> LGParams<T> {
    /// Inverse of [`LGParams::to_params`] on `vars` laid out as `layout`.
    pub fn from_params(layout: &ParamVector, vars: &[T]) -> Result<Self> {
        let p = LGParams {
            a0: layout.vector(vars, "a0")?,
            q0: layout.matrix(vars, "q0")?,
            a: layout.matrix(vars, "a")?,
            q: layout.matrix(vars, "q")?,
            b: layout.matrix(vars, "b")?,
            r: layout.matrix(vars, "r")?,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn state_dim(&self) -> usize {
        self.a0.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn values(&self) -> LGParams<f64> {
        LGParams {
            a0: self.a0.iter().map(|v| v.value()).collect(),
            q0: self.q0.values(),
            a: self.a.values(),
            q: self.q.values(),
            b: self.b.values(),
            r: self.r.values(),
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.state_dim();
        let m = self.obs_dim();
        let sq = |mat: &Matrix<T>, n: usize| mat.rows() == n && mat.cols() == n;
        if d == 0 || m == 0 {
            return Err(Error::DimMismatch(
                "state and observation dims must be >= 1".into(),
            ));
        }
        if !sq(&self.q0, d)
            || !sq(&self.a, d)
            || !sq(&self.q, d)
            || !sq(&self.r, m)
            || self.b.cols() != d
        {
            return Err(Error::DimMismatch(format!(
                "inconsistent model shapes for d={d}, m={m}"
            )));
        }
        Ok(())
    }

    pub fn prior(&self) -> Gaussian<T> {
        Gaussian {
            mean: self.a0.clone(),
            cov: self.q0.clone(),
        }
    }
}

/// Emission `y_k ~ N(h(x_k), R)` with `h = cos ∘ tanh ∘ affine` (each
/// nonlinearity switchable).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearEmission {
    pub decoder: Mlp<f64>,
    #[serde(default = "default_true")]
    pub output_tanh: bool,
    pub apply_cos: bool,
    pub r: Matrix<f64>,
}

fn default_true() -> bool {
    true
}

impl NonlinearEmission {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        self.decoder.validate()?;
        if self.decoder.input_dim() != state_dim {
            return Err(Error::DimMismatch(format!(
                "decoder input dim {} != state dim {state_dim}",
                self.decoder.input_dim()
            )));
        }
        let m = self.decoder.output_dim();
        if self.r.rows() != m || self.r.cols() != m {
            return Err(Error::DimMismatch(
                "emission covariance does not match decoder output".into(),
            ));
        }
        self.r
            .cholesky()
            .map_err(|_| Error::not_pd("emission covariance"))?;
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    /// Emission mean `h(x)` with decoder weights lifted to `T`.
    pub fn mean<T: Real>(&self, decoder: &Mlp<T>, x: &[T]) -> Result<Vec<T>> {
        let mut out = decoder.forward(x)?;
        for v in out.iter_mut() {
            if self.output_tanh {
                *v = v.tanh();
            }
            if self.apply_cos {
                *v = v.cos();
            }
        }
        Ok(out)
    }

    pub fn mean_f64(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mean(&self.decoder, x)
    }
}

/// States `x_{0:n}` and observations `y_{0:n}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, observations: Vec<Vec<f64>>) -> Result<Self> {
        if states.len() != observations.len() {
            return Err(Error::LengthMismatch(format!(
                "{} states vs {} observations",
                states.len(),
                observations.len()
            )));
        }
        if states.is_empty() {
            return Err(Error::LengthMismatch("empty trajectory".into()));
        }
        let d = states[0].len();
        let m = observations[0].len();
        if states.iter().any(|s| s.len() != d) || observations.iter().any(|y| y.len() != m) {
            return Err(Error::DimMismatch("ragged trajectory".into()));
        }
        if states
            .iter()
            .chain(&observations)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFiniteValue("trajectory entry".into()));
        }
        Ok(Trajectory {
            states,
            observations,
        })
    }

    /// Number of transitions `n` (the trajectory holds `n + 1` steps).
    pub fn n(&self) -> usize {
        self.states.len() - 1
    }

    /// Keeps steps `0..=n`.
    pub fn prefix(&self, n: usize) -> Trajectory {
        Trajectory {
            states: self.states[..=n].to_vec(),
            observations: self.observations[..=n].to_vec(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.states[0].len();
        let m = self.observations[0].len();
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["k".to_string()];
        header.extend((0..d).map(|i| format!("x_{i}")));
        header.extend((0..m).map(|i| format!("y_{i}")));
        wr.write_record(&header)?;
        for (k, (x, y)) in self.states.iter().zip(&self.observations).enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(x.iter().chain(y).map(|v| fmt_f64(*v)));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.get(0) != Some("k") {
            return Err(Error::InvalidArgument(
                "trajectory CSV must start with column k".into(),
            ));
        }
        let d = header.iter().filter(|h| h.starts_with("x_")).count();
        let m = header.iter().filter(|h| h.starts_with("y_")).count();
        if d + m + 1 != header.len() {
            return Err(Error::InvalidArgument(
                "unexpected trajectory CSV columns".into(),
            ));
        }
        let mut states = Vec::new();
        let mut obs = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let k: usize = parse_field(&rec, 0)?;
            if k != i {
                return Err(Error::InvalidArgument(format!("row {i} has k={k}")));
            }
            let vals: Vec<f64> = (1..rec.len())
                .map(|j| parse_field(&rec, j))
                .collect::<Result<_>>()?;
            states.push(vals[..d].to_vec());
            obs.push(vals[d..].to_vec());
        }
        Trajectory::new(states, obs)
    }
}

fn parse_field<F: std::str::FromStr>(rec: &csv::StringRecord, j: usize) -> Result<F> {
    rec.get(j)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::InvalidArgument(format!("unparseable CSV field {j}")))
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Simulates the linear-Gaussian model for `n` transitions.
pub fn simulate_lg(params: &LGParams, n: usize, seed: u64) -> Result<Trajectory> {
    simulate_lg_stream(params, n, seed, 0)
}

pub fn simulate_lg_stream(
    params: &LGParams,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<Trajectory> {
    params.validate()?;
    let mut rng = stream_rng(seed, stream);
    let b = params.b.clone();
    let r_factor = params.r.cholesky_semidefinite()?;
    simulate_with(params, n, &mut rng, |x, rng| {
        Ok(noisy(&b.matvec(x), &r_factor, rng))
    })
}

/// Simulates linear dynamics with a nonlinear emission.
pub fn simulate_nonlinear(
    dynamics: &LGParams,
    emission: &NonlinearEmission,
    n: usize,
    seed: u64,
) -> Result<Trajectory> {
    simulate_nonlinear_stream(dynamics, emission, n, seed, 0)
}

pub fn simulate_nonlinear_stream(
    dynamics: &LGParams,
    emission: &NonlinearEmission,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<Trajectory> {
    dynamics.check_shapes()?;
    emission.validate(dynamics.state_dim())?;
    let mut rng = stream_rng(seed, stream);
    let r_factor = emission.r.cholesky_semidefinite()?;
    simulate_with(dynamics, n, &mut rng, |x, rng| {
        Ok(noisy(&emission.mean_f64(x)?, &r_factor, rng))
    })
}

fn noisy(mean: &[f64], factor: &Matrix, rng: &mut StreamRng) -> Vec<f64> {
    crate::gauss::sample_with_factor(mean, factor, rng)
}

fn simulate_with<F>(
    params: &LGParams,
    n: usize,
    rng: &mut StreamRng,
    mut emit: F,
) -> Result<Trajectory>
where
    F: FnMut(&[f64], &mut StreamRng) -> Result<Vec<f64>>,
{
    let q0_factor = params.q0.cholesky_semidefinite()?;
    let q_factor = params.q.cholesky_semidefinite()?;
    let mut states = Vec::with_capacity(n + 1);
    let mut obs = Vec::with_capacity(n + 1);
    let mut x = noisy(&params.a0, &q0_factor, rng);
    for k in 0..=n {
        obs.push(emit(&x, rng)?);
        states.push(x.clone());
        if k < n {
            x = noisy(&params.a.matvec(&x), &q_factor, rng);
        }
    }
    Trajectory::new(states, obs)
}

/// One per-step term `h̃(x, x')` of an additive functional.
#[derive(Clone)]
pub enum PairTerm {
    /// `current·x + next·x' + offset`.
    Affine {
        current: Matrix,
        next: Matrix,
        offset: Vec<f64>,
    },
    /// Scalar `zᵀ P z + bᵀ z + c` with `z = (x, x')`.
    Quadratic { p: Matrix, b: Vec<f64>, c: f64 },
    /// Arbitrary map; only evaluable pointwise.
    Custom {
        out_dim: usize,
        f: Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>,
    },
}

impl fmt::Debug for PairTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairTerm::Affine {
                current,
                next,
                offset,
            } => f
                .debug_struct("Affine")
                .field("current", current)
                .field("next", next)
                .field("offset", offset)
                .finish(),
            PairTerm::Quadratic { p, b, c } => f
                .debug_struct("Quadratic")
                .field("p", p)
                .field("b", b)
                .field("c", c)
                .finish(),
            PairTerm::Custom { out_dim, .. } => {
                f.debug_struct("Custom").field("out_dim", out_dim).finish()
            }
        }
    }
}

impl PairTerm {
    pub fn out_dim(&self) -> usize {
        match self {
            PairTerm::Affine { offset, .. } => offset.len(),
            PairTerm::Quadratic { .. } => 1,
            PairTerm::Custom { out_dim, .. } => *out_dim,
        }
    }

    pub fn eval(&self, x: &[f64], x_next: &[f64]) -> Result<Vec<f64>> {
        match self {
            PairTerm::Affine {
                current,
                next,
                offset,
            } => {
                check_cols(current, x.len())?;
                check_cols(next, x_next.len())?;
                Ok(vadd(
                    &vadd(&current.matvec(x), &next.matvec(x_next)),
                    offset,
                ))
            }
            PairTerm::Quadratic { p, b, c } => {
                let mut z = x.to_vec();
                z.extend_from_slice(x_next);
                check_cols(p, z.len())?;
                Ok(vec![dot(&z, &p.matvec(&z)) + dot(b, &z) + c])
            }
            PairTerm::Custom { out_dim, f } => {
                let out = f(x, x_next);
                if out.len() != *out_dim {
                    return Err(Error::DimMismatch("custom functional output width".into()));
                }
                Ok(out)
            }
        }
    }

    /// `E[h̃(x, x')]` under a joint Gaussian over `(x, x')`.
    pub fn expect<T: Real>(&self, pair: &Gaussian<T>) -> Result<Vec<T>> {
        match self {
            PairTerm::Affine {
                current,
                next,
                offset,
            } => {
                let d = current.cols();
                if d + next.cols() != pair.dim() {
                    return Err(Error::DimMismatch(
                        "functional does not match pair dimension".into(),
                    ));
                }
                let cur: Matrix<T> = current.lift();
                let nxt: Matrix<T> = next.lift();
                let m = vadd(&cur.matvec(&pair.mean[..d]), &nxt.matvec(&pair.mean[d..]));
                Ok(vadd(&m, &lift_vec(offset)))
            }
            PairTerm::Quadratic { p, b, c } => {
                check_cols(p, pair.dim())?;
                let pl: Matrix<T> = p.lift();
                let quad = dot(&pair.mean, &pl.matvec(&pair.mean)) + pl.matmul(&pair.cov).trace();
                Ok(vec![quad + dot(&lift_vec::<T>(b), &pair.mean) + *c])
            }
            PairTerm::Custom { .. } => Err(Error::UnsupportedFunctionalForm(
                "custom per-step term has no closed-form Gaussian expectation".into(),
            )),
        }
    }
}

fn check_cols(m: &Matrix, n: usize) -> Result<()> {
    if m.cols() != n {
        return Err(Error::DimMismatch(format!(
            "coefficient with {} columns applied to length {n}",
            m.cols()
        )));
    }
    Ok(())
}

/// Which steps `k` carry the per-step term.
#[derive(Clone, Debug, PartialEq)]
pub enum Steps {
    All,
    Only(usize),
}

/// `h_{0:n}(x) = Σ_{k=0}^{n-1} h̃_k(x_k, x_{k+1})` with a shared per-step term,
/// optionally restricted to one step.
#[derive(Clone, Debug)]
pub struct AdditiveFunctional {
    pub term: PairTerm,
    pub steps: Steps,
    /// Uniform bound on `‖h̃_k‖∞` when known.
    pub h_inf: Option<f64>,
}

impl AdditiveFunctional {
    /// `h̃_k(x, x') = x`.
    pub fn state_sum(d: usize) -> Self {
        AdditiveFunctional {
            term: PairTerm::Affine {
                current: Matrix::identity(d),
                next: Matrix::zeros(d, d),
                offset: vec![0.0; d],
            },
            steps: Steps::All,
            h_inf: None,
        }
    }

    /// `h̃_k(x, x') = x'`.
    pub fn next_state_sum(d: usize) -> Self {
        AdditiveFunctional {
            term: PairTerm::Affine {
                current: Matrix::zeros(d, d),
                next: Matrix::identity(d),
                offset: vec![0.0; d],
            },
            steps: Steps::All,
            h_inf: None,
        }
    }

    pub fn zero(d: usize, out_dim: usize) -> Self {
        AdditiveFunctional {
            term: PairTerm::Affine {
                current: Matrix::zeros(out_dim, d),
                next: Matrix::zeros(out_dim, d),
                offset: vec![0.0; out_dim],
            },
            steps: Steps::All,
            h_inf: Some(0.0),
        }
    }

    /// Scalar `h̃_k(x, x') = x·x'` for `d = 1`.
    pub fn lag_product() -> Self {
        AdditiveFunctional {
            term: PairTerm::Quadratic {
                p: Matrix::from_rows(&[&[0.0, 0.5], &[0.5, 0.0]]),
                b: vec![0.0, 0.0],
                c: 0.0,
            },
            steps: Steps::All,
            h_inf: None,
        }
    }

    pub fn custom(
        out_dim: usize,
        f: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        AdditiveFunctional {
            term: PairTerm::Custom {
                out_dim,
                f: Arc::new(f),
            },
            steps: Steps::All,
            h_inf: None,
        }
    }

    /// Restricts the functional to the single step `k`.
    pub fn only_at(mut self, k: usize) -> Self {
        self.steps = Steps::Only(k);
        self
    }

    pub fn out_dim(&self) -> usize {
        self.term.out_dim()
    }

    pub fn active(&self, k: usize) -> bool {
        match self.steps {
            Steps::All => true,
            Steps::Only(j) => j == k,
        }
    }

    /// Expectation `Σ_k E[h̃_k]` given the pairwise marginals of `(x_k, x_{k+1})`.
    pub fn expect_pairs<T: Real>(&self, pairs: &[Gaussian<T>]) -> Result<Vec<T>> {
        let mut acc = vec![T::zero(); self.out_dim()];
        for (k, pair) in pairs.iter().enumerate() {
            if self.active(k) {
                acc = vadd(&acc, &self.term.expect(pair)?);
            }
        }
        Ok(acc)
    }
}

/// `Σ_{k=0}^{n-1} h̃_k(x_k, x_{k+1})` along a state sequence.
pub fn eval_additive(states: &[Vec<f64>], f: &AdditiveFunctional) -> Result<Vec<f64>> {
    if states.len() < 2 {
        return Err(Error::LengthMismatch(format!(
            "additive functional needs at least 2 states, got {}",
            states.len()
        )));
    }
    let mut acc = vec![0.0; f.out_dim()];
    for (k, w) in states.windows(2).enumerate() {
        if f.active(k) {
            acc = vadd(&acc, &f.term.eval(&w[0], &w[1])?);
        }
    }
    Ok(acc)
}
