//! Amortized variational recursions for linear dynamics with a nonlinear
//! emission: the variational filter is propagated with Kalman-type predict
//! steps, updated either by conjugation with an encoder likelihood
//! ([`UpdateMode::Johnson`]) or by a learned gated update
//! ([`UpdateMode::Gated`]), and backward kernels come from conjugating the
//! variational transition with the previous filter.

pub mod mlp;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{natural_product, Gaussian, NaturalGaussian};
use crate::kalman::{backward_kernel, LinearBackwardKernel};
use crate::linalg::{lift_vec, vadd, Matrix};
use crate::optim::{constrain_spd, ParamVector};
use crate::rng::stream_rng;
use crate::scalar::Real;
use crate::ssm::{LGParams, NonlinearEmission};
use crate::variational::{expected_dynamics_loglik, family_entropy, BackwardVariational};

pub use mlp::{mlp_forward, xavier_init, Layer, Mlp};

/// Encoder precisions below this are rejected as improper.
pub const MIN_ENCODER_PRECISION: f64 = 1e-12;

/// Default width of the two hidden layers.
pub const DEFAULT_HIDDEN: [usize; 2] = [16, 16];

/// Variational prior `N(abar0, qbar0)` and transition `N(abar x, qbar)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalDynamics<T = f64> {
    pub abar0: Vec<T>,
    pub qbar0: Matrix<T>,
    pub abar: Matrix<T>,
    pub qbar: Matrix<T>,
}

impl VariationalDynamics<f64> {
    /// Copies the prior and transition of a linear-Gaussian model.
    pub fn from_lg(p: &LGParams) -> Self {
        VariationalDynamics {
            abar0: p.a0.clone(),
            qbar0: p.q0.clone(),
            abar: p.a.clone(),
            qbar: p.q.clone(),
        }
    }
}

impl<T: Real> VariationalDynamics<T> {
    pub fn dim(&self) -> usize {
        self.abar0.len()
    }

    pub fn prior(&self) -> Gaussian<T> {
        Gaussian {
            mean: self.abar0.clone(),
            cov: self.qbar0.clone(),
        }
    }
}

/// Single-layer perceptron with sigmoid output: the forget gate `s(u_k, y_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T = f64> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> GateParams<T> {
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.weights.cols() {
            return Err(Error::DimMismatch(format!(
                "gate input of length {} (expected {})",
                input.len(),
                self.weights.cols()
            )));
        }
        Ok(vadd(&self.weights.matvec(input), &self.bias)
            .into_iter()
            .map(|z| z.sigmoid())
            .collect())
    }
}

/// Splits an encoder output `(eta1, raw)` into natural parameters with
/// `eta2 = −diag(softplus(raw))`.
pub fn eta_from_raw<T: Real>(out: &[T]) -> Result<NaturalGaussian<T>> {
    if out.len() % 2 != 0 {
        return Err(Error::DimMismatch(
            "encoder output must hold eta1 and eta2".into(),
        ));
    }
    let d = out.len() / 2;
    let prec: Vec<T> = out[d..].iter().map(|&r| r.softplus()).collect();
    if let Some(p) = prec.iter().find(|p| !(p.value() > MIN_ENCODER_PRECISION)) {
        return Err(Error::not_pd(format!("encoder precision {:e}", p.value())));
    }
    Ok(NaturalGaussian {
        eta1: out[..d].to_vec(),
        eta2: Matrix::diag(&prec.iter().map(|&p| -p).collect::<Vec<_>>()),
    })
}

/// Encoder likelihood factor for an observation.
pub fn encode_eta<T: Real>(net: &Mlp<T>, input: &[T]) -> Result<NaturalGaussian<T>> {
    eta_from_raw(&net.forward(input)?)
}

/// `u_k = N(Ā μ, Ā Σ Āᵀ + Q̄)`.
pub fn predict_step<T: Real>(prev: &Gaussian<T>, dynamics: &VariationalDynamics<T>) -> Gaussian<T> {
    crate::kalman::predict(prev, &dynamics.abar, &dynamics.qbar)
}

/// Conjugates the predictive with the encoder factor.
pub fn johnson_update<T: Real>(
    u: &Gaussian<T>,
    encoder_out: &NaturalGaussian<T>,
) -> Result<Gaussian<T>> {
    natural_product(&u.to_natural()?, encoder_out)?.to_gaussian()
}

/// Number of log-Cholesky coordinates for dimension `d`.
pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// `(mean, log-Cholesky(cov))` coordinates of a Gaussian.
pub fn gaussian_coords<T: Real>(g: &Gaussian<T>) -> Result<Vec<T>> {
    let l = g.cov.cholesky()?.into_l();
    let d = g.dim();
    let mut out = g.mean.clone();
    for i in 0..d {
        for j in 0..=i {
            out.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
        }
    }
    Ok(out)
}

/// Inverse of [`gaussian_coords`].
pub fn gaussian_from_coords<T: Real>(coords: &[T], d: usize) -> Result<Gaussian<T>> {
    if coords.len() != d + tri_len(d) {
        return Err(Error::LengthMismatch(format!(
            "{} coordinates for dimension {d}",
            coords.len()
        )));
    }
    Ok(Gaussian {
        mean: coords[..d].to_vec(),
        cov: constrain_spd(&coords[d..], d)?,
    })
}

/// Network input `(mean, log-Cholesky(cov), y)` built from the predictive.
pub fn update_features<T: Real>(u: &Gaussian<T>, y: &[T]) -> Result<Vec<T>> {
    let mut f = gaussian_coords(u)?;
    f.extend_from_slice(y);
    Ok(f)
}

/// `s ⊙ u + (1 − s) ⊙ f(u, y)` in `(mean, log-Cholesky)` coordinates, then
/// mapped back to a Gaussian. Without a gate the network output is used as is.
pub fn gated_update<T: Real>(
    u: &Gaussian<T>,
    y: &[T],
    update_net: &Mlp<T>,
    gate: Option<&GateParams<T>>,
) -> Result<Gaussian<T>> {
    let d = u.dim();
    let features = update_features(u, y)?;
    let proposal = update_net.forward(&features)?;
    if proposal.len() != d + tri_len(d) {
        return Err(Error::DimMismatch(format!(
            "update network outputs {} values (expected {})",
            proposal.len(),
            d + tri_len(d)
        )));
    }
    let mixed = match gate {
        None => proposal,
        Some(g) => {
            let s = g.forward(&features)?;
            if s.len() != proposal.len() {
                return Err(Error::DimMismatch(
                    "gate width does not match update output".into(),
                ));
            }
            let u_coords = &features[..proposal.len()];
            s.iter()
                .zip(u_coords)
                .zip(&proposal)
                .map(|((&s, &a), &b)| s * a + (T::one() - s) * b)
                .collect()
        }
    };
    gaussian_from_coords(&mixed, d)
}

/// Backward kernel `x_{k-1} | x_k` obtained by conjugating the variational
/// transition with the variational filter at `k−1`.
pub fn backward_from_dynamics<T: Real>(
    q_prev: &Gaussian<T>,
    dynamics: &VariationalDynamics<T>,
) -> Result<LinearBackwardKernel<T>> {
    backward_kernel(q_prev, &dynamics.abar, &dynamics.qbar)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    Johnson,
    Gated,
}

/// Architecture descriptor persisted next to checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub mode: UpdateMode,
    /// Widths of the update network, input first.
    pub layer_dims: Vec<usize>,
    pub gate: bool,
    pub state_dim: usize,
    pub obs_dim: usize,
}

impl Architecture {
    /// Encoder `y ↦ (eta1, raw eta2)` or update network `(u, y) ↦ coords` with the given hidden widths.
    pub fn new(
        mode: UpdateMode,
        state_dim: usize,
        obs_dim: usize,
        hidden: &[usize],
        gate: bool,
    ) -> Self {
        let (input, output) = match mode {
            UpdateMode::Johnson => (obs_dim, 2 * state_dim),
            UpdateMode::Gated => (
                state_dim + tri_len(state_dim) + obs_dim,
                state_dim + tri_len(state_dim),
            ),
        };
        let mut layer_dims = vec![input];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(output);
        Architecture {
            mode,
            layer_dims,
            gate: gate && mode == UpdateMode::Gated,
            state_dim,
            obs_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Architecture::new(self.mode, self.state_dim, self.obs_dim, &[], self.gate);
        let ok = self.layer_dims.len() >= 2
            && self.layer_dims[0] == expected.layer_dims[0]
            && self.layer_dims.last() == expected.layer_dims.last()
            && self.layer_dims.iter().all(|&w| w > 0);
        if !ok {
            return Err(Error::DimMismatch(format!(
                "layer widths {:?} do not fit mode {:?} with d={}, m={}",
                self.layer_dims, self.mode, self.state_dim, self.obs_dim
            )));
        }
        Ok(())
    }

    fn gate_shape(&self) -> (usize, usize) {
        (
            *self.layer_dims.last().expect("validated"),
            self.layer_dims[0],
        )
    }
}

/// Amortized variational model: dynamics plus the update network (and gate).
#[derive(Clone, Debug, PartialEq)]
pub struct AmortizedModel<T = f64> {
    pub arch: Architecture,
    pub dynamics: VariationalDynamics<T>,
    pub net: Mlp<T>,
    pub gate: Option<GateParams<T>>,
}

/// Everything produced by one pass of the variational recursion.
#[derive(Clone, Debug)]
pub struct AmortizedRun<T = f64> {
    pub predictives: Vec<Gaussian<T>>,
    pub filters: Vec<Gaussian<T>>,
    pub family: BackwardVariational<T>,
}

impl AmortizedModel<f64> {
    /// Xavier-initialized networks around the given dynamics.
    pub fn init<R: Rng + ?Sized>(
        arch: Architecture,
        dynamics: VariationalDynamics<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        let net = Mlp::init(&arch.layer_dims, rng)?;
        let gate = if arch.gate {
            let (out, inp) = arch.gate_shape();
            Some(GateParams {
                weights: xavier_init(out, inp, rng)?,
                bias: vec![0.0; out],
            })
        } else {
            None
        };
        Ok(AmortizedModel {
            arch,
            dynamics,
            net,
            gate,
        })
    }

    /// Flat trainable parameters: dynamics (covariances in log-Cholesky
    /// coordinates), network, gate.
    pub fn to_params(&self) -> Result<ParamVector> {
        let mut pv = ParamVector::new();
        pv.push_vector("abar0", &self.dynamics.abar0)?;
        pv.push_spd("qbar0", &self.dynamics.qbar0)?;
        pv.push_matrix("abar", &self.dynamics.abar)?;
        pv.push_spd("qbar", &self.dynamics.qbar)?;
        pv.push_vector("net", &self.net.flatten())?;
        if let Some(g) = &self.gate {
            pv.push_matrix("gate_weights", &g.weights)?;
            pv.push_vector("gate_bias", &g.bias)?;
        }
        Ok(pv)
    }
}

impl<T: Real> AmortizedModel<T> {
    /// Rebuilds the model from `vars` laid out as `layout`.
    pub fn from_params(arch: &Architecture, layout: &ParamVector, vars: &[T]) -> Result<Self> {
        arch.validate()?;
        let dynamics = VariationalDynamics {
            abar0: layout.vector(vars, "abar0")?,
            qbar0: layout.matrix(vars, "qbar0")?,
            abar: layout.matrix(vars, "abar")?,
            qbar: layout.matrix(vars, "qbar")?,
        };
        let net = Mlp::from_flat(&arch.layer_dims, layout.slice(vars, "net")?)?;
        let gate = if arch.gate {
            Some(GateParams {
                weights: layout.matrix(vars, "gate_weights")?,
                bias: layout.vector(vars, "gate_bias")?,
            })
        } else {
            None
        };
        Ok(AmortizedModel {
            arch: arch.clone(),
            dynamics,
            net,
            gate,
        })
    }

    fn update(&self, u: &Gaussian<T>, y: &[T]) -> Result<Gaussian<T>> {
        match self.arch.mode {
            UpdateMode::Johnson => johnson_update(u, &encode_eta(&self.net, y)?),
            UpdateMode::Gated => gated_update(u, y, &self.net, self.gate.as_ref()),
        }
    }

    /// Filtering recursion over `y_{0:n}` and the induced backward family.
    pub fn run(&self, ys: &[Vec<f64>]) -> Result<AmortizedRun<T>> {
        if ys.is_empty() {
            return Err(Error::LengthMismatch("no observations".into()));
        }
        let mut predictives = Vec::with_capacity(ys.len());
        let mut filters: Vec<Gaussian<T>> = Vec::with_capacity(ys.len());
        let mut kernels = Vec::with_capacity(ys.len() - 1);
        for (k, y) in ys.iter().enumerate() {
            if y.len() != self.arch.obs_dim {
                return Err(Error::DimMismatch(format!(
                    "observation {k} has length {}",
                    y.len()
                )));
            }
            let u = if k == 0 {
                self.dynamics.prior()
            } else {
                kernels.push(backward_from_dynamics(&filters[k - 1], &self.dynamics)?);
                predict_step(&filters[k - 1], &self.dynamics)
            };
            let q = self.update(&u, &lift_vec(y))?;
            predictives.push(u);
            filters.push(q);
        }
        let family = BackwardVariational {
            terminal: filters.last().expect("nonempty").clone(),
            kernels,
        };
        Ok(AmortizedRun {
            predictives,
            filters,
            family,
        })
    }
}

/// Standard normal draws `[k][sample][coordinate]`, drawn outside any tape so
/// gradients are pathwise.
#[derive(Clone, Debug, PartialEq)]
pub struct McNoise {
    pub draws: Vec<Vec<Vec<f64>>>,
}

impl McNoise {
    pub fn draw(
        steps: usize,
        dim: usize,
        n_samples: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        let mut rng = stream_rng(seed, stream);
        let draws = (0..steps)
            .map(|_| {
                (0..n_samples)
                    .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
                    .collect()
            })
            .collect();
        Ok(McNoise { draws })
    }

    pub fn n_samples(&self) -> usize {
        self.draws.first().map_or(0, |d| d.len())
    }
}

/// Monte Carlo ELBO for linear dynamics with a nonlinear emission: prior,
/// transition and entropy terms in closed form, emission term by
/// reparameterized sampling of each variational marginal.
pub fn mc_elbo_nonlinear<T: Real>(
    dynamics: &LGParams<T>,
    emission: &NonlinearEmission,
    decoder: &Mlp<T>,
    q: &BackwardVariational<T>,
    ys: &[Vec<f64>],
    noise: &McNoise,
) -> Result<T> {
    let (closed, emission_terms) = mc_elbo_parts(dynamics, emission, decoder, q, ys, noise)?;
    Ok(closed + crate::scalar::sum(emission_terms))
}

/// Closed-form part and per-step emission estimates of [`mc_elbo_nonlinear`].
pub fn mc_elbo_parts<T: Real>(
    dynamics: &LGParams<T>,
    emission: &NonlinearEmission,
    decoder: &Mlp<T>,
    q: &BackwardVariational<T>,
    ys: &[Vec<f64>],
    noise: &McNoise,
) -> Result<(T, Vec<T>)> {
    if ys.len() != q.n() + 1 || noise.draws.len() < ys.len() {
        return Err(Error::LengthMismatch(format!(
            "{} observations, {} noise steps for a family over {} steps",
            ys.len(),
            noise.draws.len(),
            q.n() + 1
        )));
    }
    let sm = q.smoothed()?;
    let closed = expected_dynamics_loglik(dynamics, &sm)? + family_entropy(q)?;
    let r: Matrix<T> = emission.r.lift();
    let r_ch = r.cholesky()?;
    let m = emission.obs_dim();
    let norm = (r_ch.logdet() + crate::gauss::LN_2PI * m as f64) * -0.5;
    let scale = 1.0 / noise.n_samples() as f64;
    let mut per_step = Vec::with_capacity(ys.len());
    for (k, y) in ys.iter().enumerate() {
        let marg = &sm.marginals[k];
        let l = marg.cov.cholesky()?.into_l();
        let mut acc = T::zero();
        for eps in &noise.draws[k] {
            let x = vadd(&marg.mean, &l.matvec(&lift_vec(eps)));
            let h = emission.mean(decoder, &x)?;
            let resid = crate::linalg::vsub(&lift_vec(y), &h);
            acc += norm - r_ch.quad_form(&resid) * 0.5;
        }
        let est = acc * scale;
        if !est.value().is_finite() {
            return Err(Error::NonFiniteValue(format!("emission term at step {k}")));
        }
        per_step.push(est);
    }
    if !closed.value().is_finite() {
        return Err(Error::NonFiniteValue("closed-form ELBO terms".into()));
    }
    Ok((closed, per_step))
}
