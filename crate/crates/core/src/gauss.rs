//! Gaussian distributions in moment and natural parametrization.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, lift_vec, vadd, values_of, vsub, Matrix};
use crate::scalar::Real;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Multivariate normal `N(mean, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian<T = f64> {
    pub mean: Vec<T>,
    pub cov: Matrix<T>,
}

/// Natural parameters: `eta2 = -½Σ⁻¹`, `eta1 = Σ⁻¹μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalGaussian<T = f64> {
    pub eta1: Vec<T>,
    pub eta2: Matrix<T>,
}

impl Gaussian<f64> {
    pub fn lift<T: Real>(&self) -> Gaussian<T> {
        Gaussian {
            mean: lift_vec(&self.mean),
            cov: self.cov.lift(),
        }
    }

    /// Draws one sample via `mean + L·z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let l = self.cov.cholesky_semidefinite()?;
        Ok(sample_with_factor(&self.mean, &l, rng))
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && self.cov.is_finite()
    }
}

/// `mean + L z` with `z` standard normal.
pub fn sample_with_factor<R: Rng + ?Sized>(mean: &[f64], l: &Matrix<f64>, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..mean.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    vadd(mean, &l.matvec(&z))
}

impl<T: Real> Gaussian<T> {
    /// Validates shapes and symmetry; positive-definiteness is checked on use.
    pub fn new(mean: Vec<T>, cov: Matrix<T>) -> Result<Self> {
        if cov.rows() != mean.len() || cov.cols() != mean.len() {
            return Err(Error::DimMismatch(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        let scale = cov.values().max_abs().max(1.0);
        if cov.max_asymmetry() > 1e-10 * scale {
            return Err(Error::DimMismatch("covariance is not symmetric".into()));
        }
        Ok(Gaussian { mean, cov })
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Gaussian {
            mean: vec![T::zero(); d],
            cov: Matrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn values(&self) -> Gaussian<f64> {
        Gaussian {
            mean: values_of(&self.mean),
            cov: self.cov.values(),
        }
    }

    pub fn log_density(&self, x: &[T]) -> Result<T> {
        let ch = self.cov.cholesky()?;
        let diff = vsub(x, &self.mean);
        Ok((ch.logdet() + ch.quad_form(&diff) + LN_2PI * self.dim() as f64) * -0.5)
    }

    /// Differential entropy `½ log|2πe Σ|`.
    pub fn entropy(&self) -> Result<T> {
        let ch = self.cov.cholesky()?;
        Ok((ch.logdet() + (LN_2PI + 1.0) * self.dim() as f64) * 0.5)
    }

    /// `E_{x~other}[log self(x)]`.
    pub fn expected_log_density(&self, other: &Gaussian<T>) -> Result<T> {
        let ch = self.cov.cholesky()?;
        let diff = vsub(&other.mean, &self.mean);
        let tr = ch.solve_mat(&other.cov).trace();
        Ok((ch.logdet() + ch.quad_form(&diff) + tr + LN_2PI * self.dim() as f64) * -0.5)
    }

    /// Marginal over the coordinate range `start..start+len`.
    pub fn marginal(&self, start: usize, len: usize) -> Gaussian<T> {
        Gaussian {
            mean: self.mean[start..start + len].to_vec(),
            cov: self.cov.block(start, start, len, len),
        }
    }

    pub fn to_natural(&self) -> Result<NaturalGaussian<T>> {
        let prec = self.cov.cholesky()?.inverse();
        Ok(NaturalGaussian {
            eta1: prec.matvec(&self.mean),
            eta2: prec.scale(T::cst(-0.5)),
        })
    }

    /// Joint of `(x, y)` with `x ~ self` and `y | x ~ N(gain·x + offset, noise)`.
    pub fn push_affine_joint(
        &self,
        gain: &Matrix<T>,
        offset: &[T],
        noise: &Matrix<T>,
    ) -> Gaussian<T> {
        let y_mean = vadd(&gain.matvec(&self.mean), offset);
        let cross = self.cov.matmul(&gain.transpose());
        let y_cov = gain.sandwich(&self.cov).add(noise).symmetrize();
        let cov = Matrix::from_blocks(&self.cov, &cross, &cross.transpose(), &y_cov);
        let mut mean = self.mean.clone();
        mean.extend(y_mean);
        Gaussian { mean, cov }
    }

    /// Law of `gain·x + offset + noise` for `x ~ self`.
    pub fn push_affine(&self, gain: &Matrix<T>, offset: &[T], noise: &Matrix<T>) -> Gaussian<T> {
        Gaussian {
            mean: vadd(&gain.matvec(&self.mean), offset),
            cov: gain.sandwich(&self.cov).add(noise).symmetrize(),
        }
    }
}

impl<T: Real> NaturalGaussian<T> {
    pub fn dim(&self) -> usize {
        self.eta1.len()
    }

    /// Back to moment form; requires `-eta2` positive-definite.
    pub fn to_gaussian(&self) -> Result<Gaussian<T>> {
        let prec = self.eta2.scale(T::cst(-2.0)).symmetrize();
        let ch = prec
            .cholesky()
            .map_err(|_| Error::not_pd("improper natural parameters (-eta2 not PD)"))?;
        let cov = ch.inverse();
        let mean = ch.solve_vec(&self.eta1);
        Ok(Gaussian { mean, cov })
    }
}

/// Conditions the joint of `(x, y)` (with `x` the first `x_dim` coordinates)
/// on `y = y_value`.
pub fn gaussian_condition<T: Real>(
    joint: &Gaussian<T>,
    x_dim: usize,
    y_value: &[T],
) -> Result<Gaussian<T>> {
    let total = joint.dim();
    if x_dim > total || total - x_dim != y_value.len() {
        return Err(Error::DimMismatch(format!(
            "joint of dim {total} cannot split into x_dim={x_dim} and y of length {}",
            y_value.len()
        )));
    }
    let y_dim = total - x_dim;
    let sxx = joint.cov.block(0, 0, x_dim, x_dim);
    let sxy = joint.cov.block(0, x_dim, x_dim, y_dim);
    let syy = joint.cov.block(x_dim, x_dim, y_dim, y_dim);
    let ch = syy.cholesky()?;
    // K = Sxy Syy⁻¹ computed as (Syy⁻¹ Syx)ᵀ
    let gain = ch.solve_mat(&sxy.transpose()).transpose();
    let innov = vsub(y_value, &joint.mean[x_dim..]);
    let mean = vadd(&joint.mean[..x_dim], &gain.matvec(&innov));
    let cov = sxx.sub(&gain.matmul(&sxy.transpose())).symmetrize();
    Ok(Gaussian { mean, cov })
}

/// `KL(p ‖ q)`.
pub fn gaussian_kl<T: Real>(p: &Gaussian<T>, q: &Gaussian<T>) -> Result<T> {
    if p.dim() != q.dim() {
        return Err(Error::DimMismatch(format!(
            "KL between dims {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    let chp = p.cov.cholesky()?;
    let chq = q.cov.cholesky()?;
    let delta = vsub(&p.mean, &q.mean);
    let tr = chq.solve_mat(&p.cov).trace();
    let kl = (chq.logdet() - chp.logdet() + tr + chq.quad_form(&delta) - p.dim() as f64) * 0.5;
    Ok(kl)
}

/// Product of two Gaussian densities as a sum of natural parameters.
pub fn natural_product<T: Real>(
    a: &NaturalGaussian<T>,
    b: &NaturalGaussian<T>,
) -> Result<NaturalGaussian<T>> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch(format!(
            "natural product of dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let out = NaturalGaussian {
        eta1: vadd(&a.eta1, &b.eta1),
        eta2: a.eta2.add(&b.eta2).symmetrize(),
    };
    // -eta2 must stay positive-definite
    out.eta2
        .scale(T::cst(-1.0))
        .cholesky()
        .map_err(|_| Error::not_pd("conjugation produced an improper density"))?;
    Ok(out)
}

/// `E[(x - c)ᵀ M (x - c)]` for `x ~ g`.
pub fn expected_quadratic<T: Real>(g: &Gaussian<T>, m: &Matrix<T>, c: &[T]) -> T {
    let diff = vsub(&g.mean, c);
    dot(&diff, &m.matvec(&diff)) + m.matmul(&g.cov).trace()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(mean: f64, var: f64) -> Gaussian {
        Gaussian::new(vec![mean], Matrix::from_rows(&[&[var]])).unwrap()
    }

    /// Trapezoid rule on a fine grid.
    fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut acc = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            acc += f(lo + i as f64 * h);
        }
        acc * h
    }

    fn pdf(mean: f64, var: f64, x: f64) -> f64 {
        (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    #[test]
    fn condition_independent_blocks_keeps_marginal() {
        let joint = Gaussian::new(
            vec![1.0, -2.0],
            Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]),
        )
        .unwrap();
        let c = gaussian_condition(&joint, 1, &[5.0]).unwrap();
        assert_eq!(c.mean, vec![1.0]);
        assert_eq!(c.cov[(0, 0)], 2.0);
    }

    #[test]
    fn condition_correlated_pair() {
        let joint = Gaussian::new(
            vec![0.0, 0.0],
            Matrix::from_rows(&[&[1.0, 0.5], &[0.5, 1.0]]),
        )
        .unwrap();
        let c = gaussian_condition(&joint, 1, &[1.0]).unwrap();
        // grid oracle: normalize the joint density along x at y = 1
        let det = 0.75;
        let dens = |x: f64| {
            let y = 1.0;
            let q = (x * x - 2.0 * 0.5 * x * y + y * y) / det;
            (-0.5 * q).exp()
        };
        let z = integrate(dens, -12.0, 12.0, 24_000);
        let m = integrate(|x| x * dens(x), -12.0, 12.0, 24_000) / z;
        let v = integrate(|x| (x - m).powi(2) * dens(x), -12.0, 12.0, 24_000) / z;
        assert!((c.mean[0] - m).abs() < 1e-4 && (m - 0.5).abs() < 1e-4);
        assert!((c.cov[(0, 0)] - v).abs() < 1e-4 && (v - 0.75).abs() < 1e-4);
    }

    #[test]
    fn condition_at_the_mean_returns_prior_mean() {
        let joint = Gaussian::new(
            vec![0.3, -1.0, 2.0],
            Matrix::from_rows(&[&[2.0, 0.4, 0.3], &[0.4, 1.0, 0.2], &[0.3, 0.2, 1.5]]),
        )
        .unwrap();
        let c = gaussian_condition(&joint, 2, &[2.0]).unwrap();
        assert!((c.mean[0] - 0.3).abs() < 1e-15 && (c.mean[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn condition_rejects_singular_observation_block() {
        let joint = Gaussian::new(
            vec![0.0, 0.0],
            Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]),
        )
        .unwrap();
        assert!(matches!(
            gaussian_condition(&joint, 1, &[0.0]),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn kl_against_quadrature() {
        assert!(gaussian_kl(&g1(0.3, 2.0), &g1(0.3, 2.0)).unwrap().abs() < 1e-12);
        let kl_quad = |pm: f64, pv: f64, qm: f64, qv: f64| {
            integrate(
                |x| {
                    let p = pdf(pm, pv, x);
                    if p > 0.0 {
                        p * (p / pdf(qm, qv, x)).ln()
                    } else {
                        0.0
                    }
                },
                -20.0,
                20.0,
                40_000,
            )
        };
        let a = gaussian_kl(&g1(0.0, 1.0), &g1(1.0, 1.0)).unwrap();
        assert!((a - 0.5).abs() < 1e-12);
        assert!((a - kl_quad(0.0, 1.0, 1.0, 1.0)).abs() < 1e-6);
        let b = gaussian_kl(&g1(0.0, 1.0), &g1(0.0, 2.0)).unwrap();
        assert!((b - 0.5 * (2f64.ln() + 0.5 - 1.0)).abs() < 1e-12);
        assert!((b - 0.096_573_590_279_972_65).abs() < 1e-12);
        assert!((b - kl_quad(0.0, 1.0, 0.0, 2.0)).abs() < 1e-6);
    }

    #[test]
    fn natural_product_halves_variance() {
        let a = NaturalGaussian {
            eta1: vec![0.0],
            eta2: Matrix::from_rows(&[&[-0.5]]),
        };
        let p = natural_product(&a, &a).unwrap();
        assert_eq!(p.eta1, vec![0.0]);
        assert_eq!(p.eta2[(0, 0)], -1.0);
        assert!((p.to_gaussian().unwrap().cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn natural_product_matches_grid_density_product() {
        let a = g1(1.0, 1.0).to_natural().unwrap();
        let b = g1(3.0, 1.0).to_natural().unwrap();
        let g = natural_product(&a, &b).unwrap().to_gaussian().unwrap();
        let dens = |x: f64| pdf(1.0, 1.0, x) * pdf(3.0, 1.0, x);
        let z = integrate(dens, -15.0, 20.0, 35_000);
        let m = integrate(|x| x * dens(x), -15.0, 20.0, 35_000) / z;
        let v = integrate(|x| (x - m).powi(2) * dens(x), -15.0, 20.0, 35_000) / z;
        assert!((g.mean[0] - 2.0).abs() < 1e-12 && (m - 2.0).abs() < 1e-6);
        assert!((g.cov[(0, 0)] - 0.5).abs() < 1e-12 && (v - 0.5).abs() < 1e-6);
    }

    #[test]
    fn natural_product_rejects_improper_result() {
        let a = NaturalGaussian {
            eta1: vec![0.0],
            eta2: Matrix::from_rows(&[&[-0.5]]),
        };
        let b = NaturalGaussian {
            eta1: vec![0.0],
            eta2: Matrix::from_rows(&[&[0.7]]),
        };
        assert!(matches!(
            natural_product(&a, &b),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn natural_round_trip() {
        let g = Gaussian::new(
            vec![0.5, -1.0],
            Matrix::from_rows(&[&[2.0, 0.3], &[0.3, 0.5]]),
        )
        .unwrap();
        let back = g.to_natural().unwrap().to_gaussian().unwrap();
        assert!(back.cov.sub(&g.cov).max_abs() < 1e-14);
        assert!(vsub(&back.mean, &g.mean).iter().all(|v| v.abs() < 1e-14));
        let unit = NaturalGaussian {
            eta1: vec![0.0],
            eta2: Matrix::from_rows(&[&[-0.5]]),
        }
        .to_gaussian()
        .unwrap();
        assert_eq!(unit.mean, vec![0.0]);
        assert!((unit.cov[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_and_cross_entropy() {
        let g = g1(0.0, 2.0);
        let h = g.entropy().unwrap();
        assert!(
            (h - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 2.0).ln()).abs() < 1e-14
        );
        // E_g[log g] = -H(g)
        assert!((g.expected_log_density(&g).unwrap() + h).abs() < 1e-14);
    }
}
