//! Exact filtering, likelihood, backward kernels and smoothing for
//! linear-Gaussian models.

use crate::error::{Error, Result};
use crate::gauss::Gaussian;
use crate::linalg::{lift_vec, vadd, vsub, Matrix};
use crate::scalar::Real;
use crate::ssm::{AdditiveFunctional, LGParams};

/// Predictive and filtering laws for `k = 0..=n` plus the log-likelihood.
#[derive(Clone, Debug)]
pub struct FilterSequence<T = f64> {
    /// `p(x_k | y_{0:k-1})`; entry 0 is the prior.
    pub predictives: Vec<Gaussian<T>>,
    /// `p(x_k | y_{0:k})`.
    pub filters: Vec<Gaussian<T>>,
    pub loglik: T,
}

/// Affine-Gaussian conditional `x_{k-1} | x_k ~ N(gain·x_k + offset, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBackwardKernel<T = f64> {
    pub gain: Matrix<T>,
    pub offset: Vec<T>,
    pub cov: Matrix<T>,
}

impl<T: Real> LinearBackwardKernel<T> {
    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn conditional(&self, x_next: &[T]) -> Gaussian<T> {
        Gaussian {
            mean: vadd(&self.gain.matvec(x_next), &self.offset),
            cov: self.cov.clone(),
        }
    }

    /// Law of `x_{k-1}` when `x_k ~ next`.
    pub fn propagate(&self, next: &Gaussian<T>) -> Gaussian<T> {
        next.push_affine(&self.gain, &self.offset, &self.cov)
    }

    /// Joint of `(x_{k-1}, x_k)` when `x_k ~ next`.
    pub fn pair(&self, next: &Gaussian<T>) -> Gaussian<T> {
        let joint = next.push_affine_joint(&self.gain, &self.offset, &self.cov);
        swap_blocks(&joint, next.dim())
    }

    pub fn values(&self) -> LinearBackwardKernel<f64> {
        LinearBackwardKernel {
            gain: self.gain.values(),
            offset: self.offset.iter().map(|v| v.value()).collect(),
            cov: self.cov.values(),
        }
    }
}

impl LinearBackwardKernel<f64> {
    pub fn lift<T: Real>(&self) -> LinearBackwardKernel<T> {
        LinearBackwardKernel {
            gain: self.gain.lift(),
            offset: lift_vec(&self.offset),
            cov: self.cov.lift(),
        }
    }
}

/// Reorders a joint over `(u, v)` with `dim(u) = first` into `(v, u)`.
pub fn swap_blocks<T: Real>(joint: &Gaussian<T>, first: usize) -> Gaussian<T> {
    let n = joint.dim();
    let second = n - first;
    let uu = joint.cov.block(0, 0, first, first);
    let uv = joint.cov.block(0, first, first, second);
    let vv = joint.cov.block(first, first, second, second);
    let mut mean = joint.mean[first..].to_vec();
    mean.extend_from_slice(&joint.mean[..first]);
    Gaussian {
        mean,
        cov: Matrix::from_blocks(&vv, &uv.transpose(), &uv, &uu),
    }
}

/// `x_k ~ prev` pushed through `x_{k+1} = A x_k + N(0, Q)`.
pub fn predict<T: Real>(prev: &Gaussian<T>, a: &Matrix<T>, q: &Matrix<T>) -> Gaussian<T> {
    let zero = vec![T::zero(); a.rows()];
    prev.push_affine(a, &zero, q)
}

/// Conditions `pred` on `y = B x + N(0, R)`; returns the filter and `log N(y; B m, B P Bᵀ + R)`.
pub fn update<T: Real>(
    pred: &Gaussian<T>,
    b: &Matrix<T>,
    r: &Matrix<T>,
    y: &[T],
) -> Result<(Gaussian<T>, T)> {
    if y.len() != b.rows() {
        return Err(Error::DimMismatch(format!(
            "observation of length {} for emission with {} rows",
            y.len(),
            b.rows()
        )));
    }
    let d = pred.dim();
    let pbt = pred.cov.matmul(&b.transpose());
    let s = b.matmul(&pbt).add(r).symmetrize();
    let ch = s
        .cholesky()
        .map_err(|_| Error::not_pd("innovation covariance"))?;
    let innov = vsub(y, &b.matvec(&pred.mean));
    let log_term =
        (ch.logdet() + ch.quad_form(&innov) + crate::gauss::LN_2PI * y.len() as f64) * -0.5;
    // K = P Bᵀ S⁻¹
    let gain = ch.solve_mat(&pbt.transpose()).transpose();
    let mean = vadd(&pred.mean, &gain.matvec(&innov));
    // Joseph form: (I - K B) P (I - K B)ᵀ + K R Kᵀ
    let ikb = Matrix::identity(d).sub(&gain.matmul(b));
    let cov = ikb.sandwich(&pred.cov).add(&gain.sandwich(r)).symmetrize();
    Ok((Gaussian { mean, cov }, log_term))
}

/// Forward recursion over `y_{0:n}`.
pub fn kalman_filter<T: Real>(params: &LGParams<T>, ys: &[Vec<f64>]) -> Result<FilterSequence<T>> {
    params.check_shapes()?;
    if ys.is_empty() {
        return Err(Error::LengthMismatch("no observations".into()));
    }
    let mut predictives = Vec::with_capacity(ys.len());
    let mut filters = Vec::with_capacity(ys.len());
    let mut loglik = T::zero();
    let mut pred = params.prior();
    for (k, y) in ys.iter().enumerate() {
        if k > 0 {
            pred = predict(&filters[k - 1], &params.a, &params.q);
        }
        let (filt, ll) = update(&pred, &params.b, &params.r, &lift_vec(y))?;
        loglik += ll;
        predictives.push(pred.clone());
        filters.push(filt);
    }
    Ok(FilterSequence {
        predictives,
        filters,
        loglik,
    })
}

/// Backward kernel of `x_{k-1} | x_k` given a filter at `k-1` and the transition.
pub fn backward_kernel<T: Real>(
    filter: &Gaussian<T>,
    a: &Matrix<T>,
    q: &Matrix<T>,
) -> Result<LinearBackwardKernel<T>> {
    let sa = filter.cov.matmul(&a.transpose());
    let pred_cov = a.matmul(&sa).add(q).symmetrize();
    let ch = pred_cov
        .cholesky()
        .map_err(|_| Error::not_pd("predictive covariance in backward kernel"))?;
    // G = Σ Aᵀ (A Σ Aᵀ + Q)⁻¹
    let gain = ch.solve_mat(&sa.transpose()).transpose();
    let ga = gain.matmul(a);
    let offset = vsub(&filter.mean, &ga.matvec(&filter.mean));
    let cov = filter.cov.sub(&ga.matmul(&filter.cov)).symmetrize();
    cov.cholesky()
        .map_err(|_| Error::not_pd("backward kernel covariance"))?;
    Ok(LinearBackwardKernel { gain, offset, cov })
}

/// Kernels `k-1 | k` for `k = 1..=n`; entry `i` maps `x_{i+1}` to `x_i`.
pub fn backward_kernels<T: Real>(
    params: &LGParams<T>,
    fs: &FilterSequence<T>,
) -> Result<Vec<LinearBackwardKernel<T>>> {
    let n = fs.filters.len().saturating_sub(1);
    fs.filters[..n]
        .iter()
        .map(|f| backward_kernel(f, &params.a, &params.q))
        .collect()
}

/// Smoothing marginals `x_k` and pairwise marginals `(x_k, x_{k+1})`.
#[derive(Clone, Debug)]
pub struct Smoothed<T = f64> {
    pub marginals: Vec<Gaussian<T>>,
    /// Entry `k` is the joint of `(x_k, x_{k+1})`.
    pub pairs: Vec<Gaussian<T>>,
}

/// Runs the kernels backwards from the terminal law.
pub fn smoother_pass<T: Real>(
    terminal: &Gaussian<T>,
    kernels: &[LinearBackwardKernel<T>],
) -> Result<Smoothed<T>> {
    let n = kernels.len();
    let mut marginals = vec![terminal.clone(); n + 1];
    let mut pairs = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let kern = &kernels[k];
        if kern.dim() != terminal.dim() || kern.gain.cols() != marginals[k + 1].dim() {
            return Err(Error::DimMismatch(format!(
                "backward kernel {k} does not match state dim"
            )));
        }
        let pair = kern.pair(&marginals[k + 1]);
        marginals[k] = pair.marginal(0, kern.dim());
        pairs.push(pair);
    }
    pairs.reverse();
    Ok(Smoothed { marginals, pairs })
}

/// Exact smoothing marginals for `y_{0:n}`.
pub fn kalman_smoother<T: Real>(
    params: &LGParams<T>,
    ys: &[Vec<f64>],
) -> Result<(FilterSequence<T>, Smoothed<T>)> {
    let fs = kalman_filter(params, ys)?;
    let kernels = backward_kernels(params, &fs)?;
    let sm = smoother_pass(fs.filters.last().expect("nonempty"), &kernels)?;
    Ok((fs, sm))
}

/// `Σ_k E[h̃_k(X_k, X_{k+1})]` under the pairwise marginals.
pub fn smoothed_additive<T: Real>(
    smoothed: &Smoothed<T>,
    f: &AdditiveFunctional,
) -> Result<Vec<T>> {
    f.expect_pairs(&smoothed.pairs)
}
