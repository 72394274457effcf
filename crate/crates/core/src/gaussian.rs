//! Closed-form Gaussian identities: densities, KL divergence, affine
//! marginalization and the Gaussian Bayes rule.

use std::f64::consts::PI;

use thiserror::Error;

use crate::numerics::linalg::{cholesky, cholesky_logdet, cholesky_solve, is_symmetric, symmetrize, trace};
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("covariance is singular or not positive definite")]
    SingularCovariance,
    #[error("covariance matrix is not symmetric")]
    NotSymmetric,
}

impl From<NumericsError> for GaussianError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NotSymmetric => GaussianError::NotSymmetric,
            NumericsError::ShapeMismatch { expected, found } => GaussianError::DimensionMismatch {
                expected: expected.iter().product(),
                found: found.iter().product(),
            },
            _ => GaussianError::SingularCovariance,
        }
    }
}

/// Either `c·I` or a full symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Isotropic(f64),
    Full(Tensor),
}

impl Covariance {
    /// Dense `d x d` form.
    pub fn to_matrix(&self, d: usize) -> Tensor {
        match self {
            Covariance::Isotropic(c) => Tensor::identity(d).scale(*c),
            Covariance::Full(m) => m.clone(),
        }
    }
}

/// A multivariate normal `N(mean, covariance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    mean: Tensor,
    cov: Covariance,
}

impl GaussianSpec {
    /// `N(mean, var·I)`; `var` may be zero (a point mass) but not negative.
    pub fn isotropic(mean: Tensor, var: f64) -> Result<Self, GaussianError> {
        if !(var >= 0.0) || !var.is_finite() {
            return Err(GaussianError::SingularCovariance);
        }
        let mean = flatten(mean);
        Ok(Self {
            mean,
            cov: Covariance::Isotropic(var),
        })
    }

    pub fn full(mean: Tensor, cov: Tensor) -> Result<Self, GaussianError> {
        let mean = flatten(mean);
        let d = mean.len();
        if cov.shape() != [d, d] {
            return Err(GaussianError::DimensionMismatch {
                expected: d * d,
                found: cov.len(),
            });
        }
        if !is_symmetric(&cov, 1e-10 * cov.max_abs().max(1.0)) {
            return Err(GaussianError::NotSymmetric);
        }
        Ok(Self {
            mean,
            cov: Covariance::Full(symmetrize(&cov)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn cov_matrix(&self) -> Tensor {
        self.cov.to_matrix(self.dim())
    }

    /// The isotropic variance, if the covariance is scalar.
    pub fn scalar_variance(&self) -> Option<f64> {
        match self.cov {
            Covariance::Isotropic(v) => Some(v),
            Covariance::Full(_) => None,
        }
    }
}

/// Linear part of an affine map: a scalar multiple of the identity or a matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearMap {
    Scalar(f64),
    Matrix(Tensor),
}

impl LinearMap {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>, GaussianError> {
        match self {
            LinearMap::Scalar(a) => Ok(v.iter().map(|x| a * x).collect()),
            LinearMap::Matrix(m) => {
                let (r, c) = m.dims2();
                check_dim(c, v.len())?;
                Ok((0..r).map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect())
            }
        }
    }

    fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            LinearMap::Scalar(_) => in_dim,
            LinearMap::Matrix(m) => m.rows(),
        }
    }

    fn to_matrix(&self, in_dim: usize) -> Tensor {
        match self {
            LinearMap::Scalar(a) => Tensor::identity(in_dim).scale(*a),
            LinearMap::Matrix(m) => m.clone(),
        }
    }
}

/// The transition kernel `x | y ~ N(A·y + shift, noise)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineKernel {
    pub linear: LinearMap,
    pub shift: Tensor,
    pub noise: Covariance,
}

impl AffineKernel {
    pub fn new(linear: LinearMap, shift: Tensor, noise: Covariance) -> Self {
        Self {
            linear,
            shift: flatten(shift),
            noise,
        }
    }

    /// Distribution of `x` given a fixed `y`.
    pub fn at(&self, y: &Tensor) -> Result<GaussianSpec, GaussianError> {
        let m = self.linear.apply(y.data())?;
        check_dim(self.shift.len(), m.len())?;
        let mean: Vec<f64> = m.iter().zip(self.shift.data()).map(|(a, b)| a + b).collect();
        let mean = Tensor::from_vec(mean);
        match &self.noise {
            Covariance::Isotropic(v) => GaussianSpec::isotropic(mean, *v),
            Covariance::Full(c) => GaussianSpec::full(mean, c.clone()),
        }
    }
}

fn flatten(t: Tensor) -> Tensor {
    let n = t.len();
    t.reshape(vec![n]).expect("same length")
}

fn check_dim(expected: usize, found: usize) -> Result<(), GaussianError> {
    if expected != found {
        return Err(GaussianError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// `ln n(x; mean, Q)`.
pub fn gaussian_logpdf(x: &Tensor, g: &GaussianSpec) -> Result<f64, GaussianError> {
    let d = g.dim();
    check_dim(d, x.len())?;
    let diff: Vec<f64> = x.data().iter().zip(g.mean.data()).map(|(a, b)| a - b).collect();
    let half_log_2pi = 0.5 * d as f64 * (2.0 * PI).ln();
    match &g.cov {
        Covariance::Isotropic(v) => {
            if *v <= 0.0 {
                return Err(GaussianError::SingularCovariance);
            }
            let q: f64 = diff.iter().map(|e| e * e).sum();
            Ok(-half_log_2pi - 0.5 * d as f64 * v.ln() - 0.5 * q / v)
        }
        Covariance::Full(c) => {
            let l = cholesky(c)?;
            let sol = cholesky_solve(&l, &Tensor::from_vec(diff.clone()))?;
            let q: f64 = sol.data().iter().zip(&diff).map(|(a, b)| a * b).sum();
            Ok(-half_log_2pi - 0.5 * cholesky_logdet(&l) - 0.5 * q)
        }
    }
}

/// `KL(p ‖ q)` between two Gaussians of equal dimension.
pub fn gaussian_kl(p: &GaussianSpec, q: &GaussianSpec) -> Result<f64, GaussianError> {
    let d = p.dim();
    check_dim(d, q.dim())?;
    let dmu: Vec<f64> = q.mean.data().iter().zip(p.mean.data()).map(|(a, b)| a - b).collect();
    let df = d as f64;
    if let (Covariance::Isotropic(v1), Covariance::Isotropic(v2)) = (&p.cov, &q.cov) {
        if *v1 <= 0.0 || *v2 <= 0.0 {
            return Err(GaussianError::SingularCovariance);
        }
        let q2: f64 = dmu.iter().map(|e| e * e).sum();
        return Ok(0.5 * (df * (v2 / v1).ln() - df + df * v1 / v2 + q2 / v2));
    }
    let l1 = cholesky(&p.cov_matrix())?;
    let l2 = cholesky(&q.cov_matrix())?;
    let tr = trace(&cholesky_solve(&l2, &p.cov_matrix())?);
    let sol = cholesky_solve(&l2, &Tensor::from_vec(dmu.clone()))?;
    let quad: f64 = sol.data().iter().zip(&dmu).map(|(a, b)| a * b).sum();
    Ok(0.5 * (cholesky_logdet(&l2) - cholesky_logdet(&l1) - df + tr + quad))
}

/// Marginal of `x` when `y ~ inner` and `x | y ~ kernel`:
/// `N(A·μ₂ + μ₁, A·Σ₂·Aᵀ + Σ₁)`.
pub fn gaussian_marginal(inner: &GaussianSpec, kernel: &AffineKernel) -> Result<GaussianSpec, GaussianError> {
    let dy = inner.dim();
    let dx = kernel.linear.out_dim(dy);
    check_dim(dx, kernel.shift.len())?;
    let mean = kernel.linear.apply(inner.mean.data())?;
    let mean = Tensor::from_vec(mean.iter().zip(kernel.shift.data()).map(|(a, b)| a + b).collect());
    if let (LinearMap::Scalar(a), Covariance::Isotropic(s2), Covariance::Isotropic(s1)) =
        (&kernel.linear, &inner.cov, &kernel.noise)
    {
        return GaussianSpec::isotropic(mean, a * a * s2 + s1);
    }
    let a = kernel.linear.to_matrix(dy);
    let noise = kernel.noise.to_matrix(dx);
    check_dim(dx, noise.rows())?;
    let cov = a.matmul(&inner.cov_matrix())?.matmul(&a.transpose())?.add(&noise)?;
    GaussianSpec::full(mean, symmetrize(&cov))
}

/// The reverse kernel `y | x` of the joint `y ~ prior`, `x | y ~ kernel`.
///
/// With `S = A·Σ₂·Aᵀ + Σ₁` and `Σ₃ = Σ₂·Aᵀ·S⁻¹`, the conditional is
/// `N(Σ₃(x − A·μ₂ − μ₁) + μ₂, Σ₂ − Σ₃·A·Σ₂)`, returned here as an affine
/// kernel in `x`.
pub fn gaussian_posterior_kernel(prior: &GaussianSpec, kernel: &AffineKernel) -> Result<AffineKernel, GaussianError> {
    let dy = prior.dim();
    let dx = kernel.linear.out_dim(dy);
    check_dim(dx, kernel.shift.len())?;
    let a_mu = kernel.linear.apply(prior.mean.data())?;
    let x_mean: Vec<f64> = a_mu.iter().zip(kernel.shift.data()).map(|(a, b)| a + b).collect();

    if let (LinearMap::Scalar(a), Covariance::Isotropic(s2), Covariance::Isotropic(s1)) =
        (&kernel.linear, &prior.cov, &kernel.noise)
    {
        let s = a * a * s2 + s1;
        if s <= 0.0 {
            return Err(GaussianError::SingularCovariance);
        }
        let gain = s2 * a / s;
        let shift: Vec<f64> = prior.mean.data().iter().zip(&x_mean).map(|(m, xm)| m - gain * xm).collect();
        return Ok(AffineKernel::new(
            LinearMap::Scalar(gain),
            Tensor::from_vec(shift),
            Covariance::Isotropic((s2 - gain * a * s2).max(0.0)),
        ));
    }

    let a = kernel.linear.to_matrix(dy);
    let s2 = prior.cov_matrix();
    let s = a.matmul(&s2)?.matmul(&a.transpose())?.add(&kernel.noise.to_matrix(dx))?;
    let l = cholesky(&symmetrize(&s))?;
    // Σ₃ = (S⁻¹·A·Σ₂)ᵀ because S and Σ₂ are symmetric.
    let gain = cholesky_solve(&l, &a.matmul(&s2)?)?.transpose();
    let cov = s2.sub(&gain.matmul(&a)?.matmul(&s2)?)?;
    let gx = LinearMap::Matrix(gain.clone()).apply(&x_mean)?;
    let shift: Vec<f64> = prior.mean.data().iter().zip(&gx).map(|(m, g)| m - g).collect();
    Ok(AffineKernel::new(
        LinearMap::Matrix(gain),
        Tensor::from_vec(shift),
        Covariance::Full(symmetrize(&cov)),
    ))
}

/// Distribution of `y` given an observed `x`.
pub fn gaussian_posterior(x: &Tensor, prior: &GaussianSpec, kernel: &AffineKernel) -> Result<GaussianSpec, GaussianError> {
    let post = gaussian_posterior_kernel(prior, kernel)?;
    check_dim(kernel.linear.out_dim(prior.dim()), x.len())?;
    post.at(x)
}
