//! Backward-factorized variational families over linear-Gaussian kernels:
//! smoothed expectations, the ELBO in closed and recursive form, and the
//! per-step constants `c_k` entering the additive error bound.

use crate::error::{Error, Result};
use crate::gauss::{gaussian_condition, gaussian_kl, Gaussian, LN_2PI};
use crate::kalman::{
    backward_kernels, kalman_filter, smoother_pass, FilterSequence, LinearBackwardKernel, Smoothed,
};
use crate::linalg::{dot, lift_vec, vadd, Matrix};
use crate::scalar::Real;
use crate::ssm::{AdditiveFunctional, LGParams};

/// `q(x_{0:n}) = q_n(x_n) Π_k q_{k-1|k}(x_k, x_{k-1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardVariational<T = f64> {
    pub terminal: Gaussian<T>,
    /// Entry `i` is the kernel of `x_i | x_{i+1}`.
    pub kernels: Vec<LinearBackwardKernel<T>>,
}

impl<T: Real> BackwardVariational<T> {
    /// Index `n` of the terminal law.
    pub fn n(&self) -> usize {
        self.kernels.len()
    }

    pub fn smoothed(&self) -> Result<Smoothed<T>> {
        smoother_pass(&self.terminal, &self.kernels)
    }

    /// The family induced by filtering and backward kernels of a linear-Gaussian model.
    pub fn from_lg_model(
        model: &LGParams<T>,
        ys: &[Vec<f64>],
    ) -> Result<(Self, FilterSequence<T>)> {
        let fs = kalman_filter(model, ys)?;
        let kernels = backward_kernels(model, &fs)?;
        let q = BackwardVariational {
            terminal: fs.filters.last().expect("nonempty").clone(),
            kernels,
        };
        Ok((q, fs))
    }

    pub fn values(&self) -> BackwardVariational<f64> {
        BackwardVariational {
            terminal: self.terminal.values(),
            kernels: self.kernels.iter().map(|k| k.values()).collect(),
        }
    }
}

/// `q h_{0:n}` for linear or quadratic per-step terms.
pub fn variational_smoothed_additive<T: Real>(
    q: &BackwardVariational<T>,
    f: &AdditiveFunctional,
) -> Result<Vec<T>> {
    f.expect_pairs(&q.smoothed()?.pairs)
}

/// `E[log N(y; B x, R)]` for `x ~ marginal`.
pub fn expected_emission_loglik<T: Real>(
    b: &Matrix<T>,
    r: &Matrix<T>,
    y: &[f64],
    marginal: &Gaussian<T>,
) -> Result<T> {
    let residual = Gaussian {
        mean: crate::linalg::vsub(&lift_vec(y), &b.matvec(&marginal.mean)),
        cov: b.sandwich(&marginal.cov),
    };
    Gaussian {
        mean: vec![T::zero(); r.rows()],
        cov: r.clone(),
    }
    .expected_log_density(&residual)
}

/// `E[log χ(x_0)] + Σ_k E[log m(x_{k-1}, x_k)]` under the family's marginals.
pub fn expected_dynamics_loglik<T: Real>(theta: &LGParams<T>, smoothed: &Smoothed<T>) -> Result<T> {
    let d = theta.state_dim();
    let mut acc = theta.prior().expected_log_density(&smoothed.marginals[0])?;
    // residual x_k - A x_{k-1} = [-A  I] (x_{k-1}, x_k)
    let mut gain = Matrix::zeros(d, 2 * d);
    gain.set_block(0, 0, &theta.a.scale(T::cst(-1.0)));
    gain.set_block(0, d, &Matrix::identity(d));
    let zero_vec = vec![T::zero(); d];
    let zero_cov = Matrix::zeros(d, d);
    let noise = Gaussian {
        mean: zero_vec.clone(),
        cov: theta.q.clone(),
    };
    for pair in &smoothed.pairs {
        let residual = pair.push_affine(&gain, &zero_vec, &zero_cov);
        acc += noise.expected_log_density(&residual)?;
    }
    Ok(acc)
}

/// Entropy of the family: `H(q_n) + Σ_k ½ log|2πe C_k|`.
pub fn family_entropy<T: Real>(q: &BackwardVariational<T>) -> Result<T> {
    let mut acc = q.terminal.entropy()?;
    for k in &q.kernels {
        acc += kernel_entropy(k)?;
    }
    Ok(acc)
}

fn kernel_entropy<T: Real>(k: &LinearBackwardKernel<T>) -> Result<T> {
    let ch = k.cov.cholesky()?;
    Ok((ch.logdet() + (LN_2PI + 1.0) * k.dim() as f64) * 0.5)
}

/// ELBO of a given backward family under the linear-Gaussian model `theta`.
pub fn elbo_of_family<T: Real>(
    theta: &LGParams<T>,
    q: &BackwardVariational<T>,
    ys: &[Vec<f64>],
) -> Result<T> {
    theta.check_shapes()?;
    if ys.len() != q.n() + 1 {
        return Err(Error::LengthMismatch(format!(
            "{} observations for a family over {} steps",
            ys.len(),
            q.n() + 1
        )));
    }
    let sm = q.smoothed()?;
    let mut elbo = expected_dynamics_loglik(theta, &sm)?;
    for (y, m) in ys.iter().zip(&sm.marginals) {
        elbo += expected_emission_loglik(&theta.b, &theta.r, y, m)?;
    }
    Ok(elbo + family_entropy(q)?)
}

/// ELBO with `q` the filtering/backward family of the model `lambda`.
pub fn elbo_closed_form<T: Real>(
    theta: &LGParams<T>,
    lambda: &LGParams<T>,
    ys: &[Vec<f64>],
) -> Result<T> {
    let (q, _) = BackwardVariational::from_lg_model(lambda, ys)?;
    elbo_of_family(theta, &q, ys)
}

/// `xᵀ P x + bᵀ x + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm<T = f64> {
    pub p: Matrix<T>,
    pub b: Vec<T>,
    pub c: T,
}

impl<T: Real> QuadraticForm<T> {
    pub fn zero(d: usize) -> Self {
        QuadraticForm {
            p: Matrix::zeros(d, d),
            b: vec![T::zero(); d],
            c: T::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn eval(&self, x: &[T]) -> T {
        dot(x, &self.p.matvec(x)) + dot(&self.b, x) + self.c
    }

    pub fn add(&self, other: &Self) -> Self {
        QuadraticForm {
            p: self.p.add(&other.p),
            b: vadd(&self.b, &other.b),
            c: self.c + other.c,
        }
    }

    pub fn neg(&self) -> Self {
        QuadraticForm {
            p: self.p.scale(T::cst(-1.0)),
            b: self.b.iter().map(|&v| -v).collect(),
            c: -self.c,
        }
    }

    pub fn add_const(mut self, v: T) -> Self {
        self.c += v;
        self
    }

    /// `E[self(X)]` for `X ~ g`.
    pub fn expect(&self, g: &Gaussian<T>) -> T {
        dot(&g.mean, &self.p.matvec(&g.mean))
            + self.p.matmul(&g.cov).trace()
            + dot(&self.b, &g.mean)
            + self.c
    }

    /// `x ↦ E[self(X)]` with `X | x ~ N(gain·x + offset, cov)`.
    pub fn pull_back(&self, gain: &Matrix<T>, offset: &[T], cov: &Matrix<T>) -> Self {
        let po = self.p.matvec(offset);
        let lin = vadd(&po.iter().map(|&v| v * 2.0).collect::<Vec<_>>(), &self.b);
        QuadraticForm {
            p: gain.transpose().matmul(&self.p).matmul(gain).symmetrize(),
            b: gain.transpose().matvec(&lin),
            c: dot(offset, &po) + dot(&self.b, offset) + self.c + self.p.matmul(cov).trace(),
        }
    }

    /// `x ↦ E[log N(M x + v + η; 0, S)]` with `η ~ N(0, noise)`.
    pub fn log_normal_affine(
        m: &Matrix<T>,
        v: &[T],
        s: &Matrix<T>,
        noise: Option<&Matrix<T>>,
    ) -> Result<Self> {
        let ch = s.cholesky()?;
        let s_inv_m = ch.solve_mat(m);
        let s_inv_v = ch.solve_vec(v);
        let mut c = dot(v, &s_inv_v) + ch.logdet() + LN_2PI * s.rows() as f64;
        if let Some(nz) = noise {
            c += ch.solve_mat(nz).trace();
        }
        Ok(QuadraticForm {
            p: m.transpose()
                .matmul(&s_inv_m)
                .scale(T::cst(-0.5))
                .symmetrize(),
            b: m.transpose().matvec(&s_inv_v).iter().map(|&x| -x).collect(),
            c: c * -0.5,
        })
    }

    /// `x ↦ log N(x; mean, cov)`.
    pub fn log_density(g: &Gaussian<T>) -> Result<Self> {
        let neg_mean: Vec<T> = g.mean.iter().map(|&v| -v).collect();
        Self::log_normal_affine(&Matrix::identity(g.dim()), &neg_mean, &g.cov, None)
    }

    pub fn values(&self) -> QuadraticForm<f64> {
        QuadraticForm {
            p: self.p.values(),
            b: self.b.iter().map(|v| v.value()).collect(),
            c: self.c.value(),
        }
    }
}

/// ELBO through the online statistic `T_k`, given per-step marginals
/// `q_k` (`k = 0..=n`, with `q_n` the terminal law) and the family's kernels.
/// Returns the ELBO and the sequence `T_0..T_n`.
pub fn elbo_recursive<T: Real>(
    theta: &LGParams<T>,
    q: &BackwardVariational<T>,
    marginals: &[Gaussian<T>],
    ys: &[Vec<f64>],
) -> Result<(T, Vec<QuadraticForm<T>>)> {
    theta.check_shapes()?;
    let n = q.n();
    if marginals.len() != n + 1 || ys.len() != n + 1 {
        return Err(Error::LengthMismatch(format!(
            "{} marginals and {} observations for a family over {} steps",
            marginals.len(),
            ys.len(),
            n + 1
        )));
    }
    if param_gap(&marginals[n], &q.terminal) > 1e-12 {
        return Err(Error::InvalidArgument(
            "the last marginal must be the terminal law".into(),
        ));
    }
    let d = theta.state_dim();
    let ident = Matrix::identity(d);
    let neg_b = theta.b.scale(T::cst(-1.0));
    let emission =
        |k: usize| QuadraticForm::log_normal_affine(&neg_b, &lift_vec(&ys[k]), &theta.r, None);

    let neg_a0: Vec<T> = theta.a0.iter().map(|&v| -v).collect();
    let mut stat = QuadraticForm::log_normal_affine(&ident, &neg_a0, &theta.q0, None)?
        .add(&emission(0)?)
        .add(&QuadraticForm::log_density(&marginals[0])?.neg());
    let mut trace = Vec::with_capacity(n + 1);
    trace.push(stat.clone());
    for k in 1..=n {
        let kern = &q.kernels[k - 1];
        // inside the expectation over X = x_{k-1} ~ N(G x + o, C):
        // T_{k-1}(X) + log q_{k-1}(X) + log m(X, x)
        let inner = stat.add(&QuadraticForm::log_density(&marginals[k - 1])?);
        let mut next = inner.pull_back(&kern.gain, &kern.offset, &kern.cov);
        // log N(x - A X; 0, Q) with x - A X = (I - A G) x - A o - A ε
        let m = ident.sub(&theta.a.matmul(&kern.gain));
        let v: Vec<T> = theta.a.matvec(&kern.offset).iter().map(|&x| -x).collect();
        let noise = theta.a.sandwich(&kern.cov);
        next = next.add(&QuadraticForm::log_normal_affine(
            &m,
            &v,
            &theta.q,
            Some(&noise),
        )?);
        next = next
            .add(&emission(k)?)
            .add(&QuadraticForm::log_density(&marginals[k])?.neg())
            .add_const(kernel_entropy(kern)?);
        stat = next;
        trace.push(stat.clone());
    }
    Ok((stat.expect(&q.terminal), trace))
}

/// Largest absolute difference between the parameters of two Gaussians.
fn param_gap<T: Real>(a: &Gaussian<T>, b: &Gaussian<T>) -> f64 {
    let (a, b) = (a.values(), b.values());
    a.mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).abs())
        .chain(a.cov.sub(&b.cov).as_slice().iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
}

/// Per-step constants `c_0..c_n` and the instrumental laws used to build them.
#[derive(Clone, Debug)]
pub struct CkProfile<T = f64> {
    pub values: Vec<T>,
    pub rho_hats: Vec<Gaussian<T>>,
}

impl<T: Real> CkProfile<T> {
    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.value()).collect()
    }
}

/// KL values below this multiple of `ε·dim` are rounding noise and read as zero.
pub const KL_ROUNDING_FLOOR: f64 = 64.0 * f64::EPSILON;

/// `2 min(1, √(KL/2))`, the Pinsker bound on twice the total variation, for
/// a KL computed between `dim`-dimensional Gaussians.
pub fn ck_from_kl<T: Real>(kl: T, dim: usize) -> T {
    if kl.value() <= KL_ROUNDING_FLOOR * dim as f64 {
        return T::zero();
    }
    let tv = (kl * 0.5).sqrt();
    if tv.value() >= 1.0 {
        T::cst(2.0)
    } else {
        tv * 2.0
    }
}

/// Constants `c_k` for a linear-Gaussian family `lambda` against `theta`.
///
/// `rho_hats` defaults to the filters of `lambda`, whose last entry is the
/// family's terminal law as required.
pub fn ck_linear<T: Real>(
    theta: &LGParams<T>,
    lambda: &LGParams<T>,
    rho_hats: Option<&[Gaussian<T>]>,
    ys: &[Vec<f64>],
) -> Result<CkProfile<T>> {
    let (q, fs) = BackwardVariational::from_lg_model(lambda, ys)?;
    let rho = rho_hats.map_or_else(|| fs.filters.clone(), |r| r.to_vec());
    ck_for_family(theta, &q, rho, ys)
}

/// Constants `c_k` for an arbitrary linear backward family and instrumental laws.
pub fn ck_for_family<T: Real>(
    theta: &LGParams<T>,
    q: &BackwardVariational<T>,
    rho: Vec<Gaussian<T>>,
    ys: &[Vec<f64>],
) -> Result<CkProfile<T>> {
    theta.check_shapes()?;
    let n = q.n();
    if rho.len() != n + 1 || ys.len() != n + 1 {
        return Err(Error::LengthMismatch(format!(
            "{} instrumental laws and {} observations for {} steps",
            rho.len(),
            ys.len(),
            n + 1
        )));
    }
    if param_gap(&rho[n], &q.terminal) > 1e-12 {
        return Err(Error::InvalidArgument(
            "the last instrumental law must equal the terminal variational law".into(),
        ));
    }
    let d = theta.state_dim();
    let m = theta.obs_dim();
    let zero_d = vec![T::zero(); d];
    let zero_m = vec![T::zero(); m];
    let phi0 = kalman_filter(theta, &ys[..1])?.filters.remove(0);
    let mut values = vec![ck_from_kl(gaussian_kl(&rho[0], &phi0)?, d)];
    // y_k = [0  B] (x_{k-1}, x_k) + noise
    let mut obs_gain = Matrix::zeros(m, 2 * d);
    obs_gain.set_block(0, d, &theta.b);
    for k in 1..=n {
        let joint_var = q.kernels[k - 1].pair(&rho[k]);
        let pair = rho[k - 1].push_affine_joint(&theta.a, &zero_d, &theta.q);
        let with_obs = pair.push_affine_joint(&obs_gain, &zero_m, &theta.r);
        let joint_model = gaussian_condition(&with_obs, 2 * d, &lift_vec(&ys[k]))?;
        values.push(ck_from_kl(gaussian_kl(&joint_var, &joint_model)?, 2 * d));
    }
    Ok(CkProfile {
        values,
        rho_hats: rho,
    })
}

/// Right-hand side of the additive smoothing error bound:
/// `2(σ+/σ−) Σ_{k<n} ‖h̃_k‖∞ (c_0 + Σ_{m=1}^{k} ρ^{k-m+1} c_m + c_{k+1} + Σ_{m=k+2}^{n} ρ^{m-k-1} c_m)`
/// with `ρ = 1 − σ−/σ+`. `ck` has length `n+1`, `h_inf` length `n`.
pub fn additive_bound_rhs(
    ck: &[f64],
    sigma_minus: f64,
    sigma_plus: f64,
    h_inf: &[f64],
) -> Result<f64> {
    if !(sigma_minus > 0.0) || !sigma_plus.is_finite() || sigma_minus > sigma_plus {
        return Err(Error::InvalidMixingConstants {
            sigma_minus,
            sigma_plus,
        });
    }
    if ck.is_empty() || h_inf.len() + 1 != ck.len() {
        return Err(Error::LengthMismatch(format!(
            "{} constants with {} per-step bounds",
            ck.len(),
            h_inf.len()
        )));
    }
    if ck.iter().chain(h_inf).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(
            "constants and bounds must be finite and nonnegative".into(),
        ));
    }
    let n = h_inf.len();
    let rho = 1.0 - sigma_minus / sigma_plus;
    let mut total = 0.0;
    for (k, &h) in h_inf.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        let mut bracket = ck[0] + ck[k + 1];
        for (m, &c) in ck.iter().enumerate().take(k + 1).skip(1) {
            bracket += rho.powi((k - m + 1) as i32) * c;
        }
        for (m, &c) in ck.iter().enumerate().take(n + 1).skip(k + 2) {
            bracket += rho.powi((m - k - 1) as i32) * c;
        }
        total += h * bracket;
    }
    Ok(2.0 * sigma_plus / sigma_minus * total)
}

/// Linear-growth envelope `4(σ+/σ−)(1 + ρ/(1−ρ)) c₊ h∞ n`.
pub fn linear_growth_bound(
    c_plus: f64,
    sigma_minus: f64,
    sigma_plus: f64,
    h_inf: f64,
    n: usize,
) -> f64 {
    let rho = 1.0 - sigma_minus / sigma_plus;
    4.0 * sigma_plus / sigma_minus * (1.0 + rho / (1.0 - rho)) * c_plus * h_inf * n as f64
}
