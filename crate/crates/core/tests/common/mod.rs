//! Independent oracles shared by the integration tests: dense joint-Gaussian
//! conditioning with nalgebra, and exhaustive path enumeration for finite
//! state models.
#![allow(dead_code)]

use bvsmooth::discrete::{DiscreteFunctional, DiscreteHMM};
use bvsmooth::linalg::Matrix;
use bvsmooth::rng::StreamRng;
use bvsmooth::ssm::LGParams;
use bvsmooth::variational::BackwardVariational;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    let data: Vec<f64> = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect();
    Matrix::from_vec(m.nrows(), m.ncols(), data).unwrap()
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_spd(d: usize, rng: &mut StreamRng) -> Matrix {
    let g = DMatrix::from_fn(d, d, |_, _| normal(rng));
    from_na(&(&g * g.transpose() / d as f64 + DMatrix::identity(d, d) * 0.2))
}

/// Random stable model: `‖A‖_F ≤ 0.95`.
pub fn random_lg(d: usize, m: usize, rng: &mut StreamRng) -> LGParams {
    let a0 = (0..d).map(|_| normal(rng)).collect();
    let q0 = random_spd(d, rng);
    let raw: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let scale: f64 = rng.random_range(0.3..0.95) / raw.norm().max(1e-12);
    let a = from_na(&(raw * scale));
    let q = random_spd(d, rng);
    let b = from_na(&DMatrix::from_fn(m, d, |_, _| normal(rng)));
    let r = random_spd(m, rng);
    LGParams { a0, q0, a, q, b, r }
}

/// Observations drawn independently of the model, so tests do not rely on the library's simulator.
pub fn random_obs(m: usize, n: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    (0..=n)
        .map(|_| (0..m).map(|_| 2.0 * normal(rng)).collect())
        .collect()
}

fn chol_logdet(s: &DMatrix<f64>) -> f64 {
    let ch = s.clone().cholesky().expect("spd");
    2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Dense posterior of `x_{0:n}` given `y_{0:n}` and the log-likelihood,
/// computed by conditioning the stacked joint Gaussian.
pub struct DensePosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub d: usize,
}

impl DensePosterior {
    pub fn new(p: &LGParams, ys: &[Vec<f64>]) -> Self {
        let d = p.state_dim();
        let m = p.obs_dim();
        let len = ys.len();
        let (a, q) = (to_na(&p.a), to_na(&p.q));
        let big = len * d;

        // prior moments of the stacked states
        let mut mu = DVector::zeros(big);
        let mut sigma = DMatrix::zeros(big, big);
        let mut marg = to_na(&p.q0);
        let mut mean_k = DVector::from_column_slice(&p.a0);
        for k in 0..len {
            if k > 0 {
                mean_k = &a * &mean_k;
                marg = &a * &marg * a.transpose() + &q;
            }
            mu.rows_mut(k * d, d).copy_from(&mean_k);
            let mut cross = marg.clone();
            for j in k..len {
                if j > k {
                    cross = &a * &cross;
                }
                sigma.view_mut((j * d, k * d), (d, d)).copy_from(&cross);
                sigma
                    .view_mut((k * d, j * d), (d, d))
                    .copy_from(&cross.transpose());
            }
        }

        let mut bb = DMatrix::zeros(len * m, big);
        let mut rr = DMatrix::zeros(len * m, len * m);
        for k in 0..len {
            bb.view_mut((k * m, k * d), (m, d)).copy_from(&to_na(&p.b));
            rr.view_mut((k * m, k * m), (m, m)).copy_from(&to_na(&p.r));
        }
        let y = DVector::from_iterator(len * m, ys.iter().flatten().copied());
        let syy = &bb * &sigma * bb.transpose() + rr;
        let sxy = &sigma * bb.transpose();
        let resid = &y - &bb * &mu;
        let ch = syy.clone().cholesky().expect("spd");
        let gain = ch.solve(&sxy.transpose()).transpose();
        let mean = &mu + &gain * &resid;
        let cov = &sigma - &gain * sxy.transpose();
        let quad = resid.dot(&ch.solve(&resid));
        let loglik = -0.5
            * (quad + chol_logdet(&syy) + (len * m) as f64 * (2.0 * std::f64::consts::PI).ln());
        DensePosterior {
            mean,
            cov,
            loglik,
            d,
        }
    }

    pub fn marginal_mean(&self, k: usize) -> DVector<f64> {
        self.mean.rows(k * self.d, self.d).into_owned()
    }

    pub fn marginal_cov(&self, k: usize) -> DMatrix<f64> {
        self.cov
            .view((k * self.d, k * self.d), (self.d, self.d))
            .into_owned()
    }

    /// `E[Σ_{k<n} x_k]`.
    pub fn state_sum(&self) -> DVector<f64> {
        let n = self.mean.len() / self.d - 1;
        (0..n)
            .map(|k| self.marginal_mean(k))
            .fold(DVector::zeros(self.d), |a, b| a + b)
    }

    /// `E[Σ_{k<n} x_k x_{k+1}]` for scalar states.
    pub fn lag_product(&self) -> f64 {
        let n = self.mean.len() - 1;
        (0..n)
            .map(|k| self.cov[(k, k + 1)] + self.mean[k] * self.mean[k + 1])
            .sum()
    }
}

/// Stacked mean and covariance of `x_{0:n}` under a backward family,
/// built from the explicit linear representation `x = c + L z`.
pub fn family_joint(q: &BackwardVariational) -> (DVector<f64>, DMatrix<f64>) {
    let d = q.terminal.dim();
    let n = q.n();
    let big = (n + 1) * d;
    let mut l = DMatrix::zeros(big, big);
    let mut c = DVector::zeros(big);
    let term_l = to_na(&q.terminal.cov).cholesky().expect("spd").l();
    l.view_mut((n * d, n * d), (d, d)).copy_from(&term_l);
    c.rows_mut(n * d, d)
        .copy_from(&DVector::from_column_slice(&q.terminal.mean));
    for k in (0..n).rev() {
        let kern = &q.kernels[k];
        let g = to_na(&kern.gain);
        let next_rows = l.rows((k + 1) * d, d).into_owned();
        let rows = &g * next_rows;
        l.rows_mut(k * d, d).copy_from(&rows);
        let noise = to_na(&kern.cov).cholesky().expect("spd").l();
        l.view_mut((k * d, k * d), (d, d)).copy_from(&noise);
        let ck = &g * c.rows((k + 1) * d, d) + DVector::from_column_slice(&kern.offset);
        c.rows_mut(k * d, d).copy_from(&ck);
    }
    let cov = &l * l.transpose();
    (c, cov)
}

/// `KL(N(m1, s1) ‖ N(m2, s2))`.
pub fn kl_dense(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let ch2 = s2.clone().cholesky().expect("spd");
    let diff = m2 - m1;
    let trace = ch2.solve(s1).trace();
    0.5 * (trace + diff.dot(&ch2.solve(&diff)) - m1.len() as f64 + chol_logdet(s2)
        - chol_logdet(s1))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Normalized weight of every state path, by brute force.
pub fn enumerate_paths(m: &DiscreteHMM) -> Vec<(Vec<usize>, f64)> {
    let s = m.n_states();
    let len = m.n() + 1;
    let total = s.pow(len as u32);
    let mut out = Vec::with_capacity(total);
    let mut z = 0.0;
    for code in 0..total {
        let mut path = Vec::with_capacity(len);
        let mut c = code;
        for _ in 0..len {
            path.push(c % s);
            c /= s;
        }
        let mut w = m.init[path[0]] * m.emis_loglik[0][path[0]].exp();
        for k in 1..len {
            w *= m.trans[path[k - 1]][path[k]] * m.emis_loglik[k][path[k]].exp();
        }
        z += w;
        out.push((path, w));
    }
    out.iter_mut().for_each(|(_, w)| *w /= z);
    out
}

pub fn enumerated_expectation(m: &DiscreteHMM, f: &DiscreteFunctional) -> f64 {
    enumerate_paths(m)
        .iter()
        .map(|(p, w)| w * (0..m.n()).map(|k| f.tables[k][p[k]][p[k + 1]]).sum::<f64>())
        .sum()
}

pub fn enumerated_loglik(m: &DiscreteHMM) -> f64 {
    let s = m.n_states();
    let len = m.n() + 1;
    let mut z = 0.0f64;
    for code in 0..s.pow(len as u32) {
        let mut c = code;
        let mut prev: Option<usize> = None;
        let mut w = 1.0;
        for k in 0..len {
            let x = c % s;
            c /= s;
            w *= match prev {
                None => m.init[x],
                Some(p) => m.trans[p][x],
            } * m.emis_loglik[k][x].exp();
            prev = Some(x);
        }
        z += w;
    }
    z.ln()
}
