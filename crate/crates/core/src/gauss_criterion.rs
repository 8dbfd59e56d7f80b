//! Sufficient statistics, the profiled Gaussian quasi-likelihood and its
//! population counterpart.
//!
//! Every criterion here is written up to the constant `−np·log(2π)/2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CovselError, Result};
use crate::linalg::{self, cholesky, log_det_chol, trace_product};
use crate::model_space::{ErrorType, FactorPoint, ModelSpec};

/// `(n, X̄_n, S_n)` with the 1/n covariance normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub n: usize,
    #[serde(with = "linalg::vector_plain")]
    pub mean: DVector<f64>,
    #[serde(with = "linalg::matrix_rows")]
    pub cov: DMatrix<f64>,
}

impl SampleMoments {
    pub fn new(n: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if n == 0 {
            return Err(CovselError::InvalidArgument("sample size must be positive".into()));
        }
        if cov.nrows() != mean.len() || !linalg::is_symmetric(&cov, linalg::SYMMETRY_TOL) {
            return Err(CovselError::InvalidArgument("covariance must be a symmetric p×p matrix".into()));
        }
        Ok(Self { n, mean, cov })
    }

    /// Treats a population covariance as unit-weight moments, so that the
    /// profiled criterion evaluates to `Q`.
    pub fn from_population(target: &PopulationTarget) -> Self {
        Self { n: 1, mean: target.mean.clone(), cov: target.cov.clone() }
    }

    pub fn p(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationTarget {
    #[serde(with = "linalg::vector_plain")]
    pub mean: DVector<f64>,
    #[serde(with = "linalg::matrix_rows")]
    pub cov: DMatrix<f64>,
}

impl PopulationTarget {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || !linalg::is_symmetric(&cov, linalg::SYMMETRY_TOL) {
            return Err(CovselError::InvalidArgument("target covariance must be symmetric p×p".into()));
        }
        cholesky(&cov, "population covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn centered(cov: DMatrix<f64>) -> Result<Self> {
        let p = cov.nrows();
        Self::new(DVector::zeros(p), cov)
    }

    pub fn p(&self) -> usize {
        self.mean.len()
    }
}

/// Row-per-observation data to `(X̄_n, S_n)`.
pub fn compute_moments(data: &DMatrix<f64>) -> Result<SampleMoments> {
    let n = data.nrows();
    if n == 0 || data.ncols() == 0 {
        return Err(CovselError::InvalidArgument("data matrix is empty".into()));
    }
    let nf = n as f64;
    let mean = DVector::from_iterator(data.ncols(), data.column_iter().map(|c| c.sum() / nf));
    let mut centered = data.clone();
    for (mut col, m) in centered.column_iter_mut().zip(mean.iter()) {
        col.add_scalar_mut(-m);
    }
    let cov = linalg::symmetrize(&(centered.transpose() * &centered / nf));
    Ok(SampleMoments { n, mean, cov })
}

fn check_dims(sigma: &DMatrix<f64>, p: usize) -> Result<()> {
    if sigma.nrows() != p || sigma.ncols() != p {
        return Err(CovselError::InvalidArgument(format!(
            "covariance is {}x{}, expected {p}x{p}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    Ok(())
}

/// `−(n/2){log det Σ + tr(S_n Σ⁻¹) + (X̄ − μ)ᵀΣ⁻¹(X̄ − μ)}`.
pub fn full_loglik(mu: &DVector<f64>, sigma: &DMatrix<f64>, moments: &SampleMoments) -> Result<f64> {
    check_dims(sigma, moments.p())?;
    let chol = cholesky(sigma, "full likelihood")?;
    let inv = chol.inverse();
    let diff = &moments.mean - mu;
    let quad = chol.solve(&diff).dot(&diff);
    let n = moments.n as f64;
    Ok(-0.5 * n * (log_det_chol(&chol) + trace_product(&moments.cov, &inv) + quad))
}

/// `ℓ̃_n(Σ) = −(n/2){log det Σ + tr(S_n Σ⁻¹)}`.
pub fn profiled_loglik(sigma: &DMatrix<f64>, moments: &SampleMoments) -> Result<f64> {
    check_dims(sigma, moments.p())?;
    Ok(moments.n as f64 * per_observation(sigma, &moments.cov)?.0)
}

/// Per-observation profiled value together with `Σ⁻¹`.
pub(crate) fn per_observation(sigma: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let chol = cholesky(sigma, "profiled likelihood")?;
    let inv = chol.inverse();
    let value = -0.5 * (log_det_chol(&chol) + trace_product(cov, &inv));
    Ok((value, inv))
}

/// `Σ⁻¹ − Σ⁻¹ C Σ⁻¹`, the derivative kernel shared by `ℓ̃_n` and `Q`.
pub(crate) fn derivative_kernel(inv: &DMatrix<f64>, cov: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::symmetrize(&(inv - inv * cov * inv))
}

/// `Q(Σ) = −½{log det Σ + tr(Σ₀Σ⁻¹)}`.
pub fn population_q(sigma: &DMatrix<f64>, target: &PopulationTarget) -> Result<f64> {
    check_dims(sigma, target.p())?;
    Ok(per_observation(sigma, &target.cov)?.0)
}

/// `Γ(μ, Σ)`, the expected one-observation log-likelihood.
pub fn population_gamma(mu: &DVector<f64>, sigma: &DMatrix<f64>, target: &PopulationTarget) -> Result<f64> {
    check_dims(sigma, target.p())?;
    let chol = cholesky(sigma, "population gamma")?;
    let diff = mu - &target.mean;
    let quad = chol.solve(&diff).dot(&diff);
    Ok(-0.5 * (log_det_chol(&chol) + trace_product(&target.cov, &chol.inverse()) + quad))
}

/// `KL(N(μ₀, Σ₀) ‖ N(μ, Σ))`.
pub fn gaussian_kl(
    mu0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let chol0 = cholesky(sigma0, "KL reference covariance")?;
    let chol = cholesky(sigma, "KL covariance")?;
    let p = sigma0.nrows() as f64;
    let diff = mu - mu0;
    let quad = chol.solve(&diff).dot(&diff);
    Ok(0.5 * (trace_product(&chol.inverse(), sigma0) + quad - p + log_det_chol(&chol) - log_det_chol(&chol0)))
}

/// `DQ(Σ)` as a symmetric matrix, so that `DQ(Σ)[H] = tr(DQ(Σ) H)`.
pub fn q_gradient(sigma: &DMatrix<f64>, target: &PopulationTarget) -> Result<DMatrix<f64>> {
    let (_, inv) = per_observation(sigma, &target.cov)?;
    Ok(derivative_kernel(&inv, &target.cov) * -0.5)
}

/// `D²Q(Σ₀)[H, H] = −½ tr(Σ₀⁻¹HΣ₀⁻¹H)`.
pub fn d2q_form(h: &DMatrix<f64>, target: &PopulationTarget) -> Result<f64> {
    check_dims(h, target.p())?;
    if !linalg::is_symmetric(h, linalg::SYMMETRY_TOL) {
        return Err(CovselError::InvalidArgument("direction must be symmetric".into()));
    }
    let inv = cholesky(&target.cov, "second derivative")?.inverse();
    let a = &inv * h;
    Ok(-0.5 * trace_product(&a, &a))
}

/// Gradient of `ℓ̃_n` over the masked coordinates of a factor class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfiledGradient {
    /// One entry per supported loading, in pattern order.
    pub loadings: Vec<f64>,
    pub uniqueness: Vec<f64>,
}

impl ProfiledGradient {
    pub fn flatten(&self) -> Vec<f64> {
        self.loadings.iter().chain(&self.uniqueness).copied().collect()
    }
}

pub fn grad_profiled(point: &FactorPoint, spec: &ModelSpec, moments: &SampleMoments) -> Result<ProfiledGradient> {
    let ModelSpec::FactorClass { pattern, error_type, .. } = spec else {
        return Err(CovselError::InvalidArgument("gradient needs a factor class".into()));
    };
    if pattern.p() != moments.p() {
        return Err(CovselError::InvalidArgument("moment dimension does not match the class".into()));
    }
    let (_, g) = value_and_gradient(point, pattern.entries(), *error_type, &moments.cov)?;
    let n = moments.n as f64;
    let split = pattern.len();
    Ok(ProfiledGradient {
        loadings: g[..split].iter().map(|v| v * n).collect(),
        uniqueness: g[split..].iter().map(|v| v * n).collect(),
    })
}

/// Per-observation value and gradient in packed coordinates.
pub(crate) fn value_and_gradient(
    point: &FactorPoint,
    entries: &[(usize, usize)],
    error_type: ErrorType,
    cov: &DMatrix<f64>,
) -> Result<(f64, Vec<f64>)> {
    let sigma = point.sigma_unchecked();
    let (value, inv) = per_observation(&sigma, cov)?;
    let kernel = derivative_kernel(&inv, cov);
    let kl = &kernel * &point.loadings;
    let mut g: Vec<f64> = entries.iter().map(|&(r, c)| -kl[(r, c)]).collect();
    match error_type {
        ErrorType::Diagonal => g.extend(kernel.diagonal().iter().map(|k| -0.5 * k)),
        ErrorType::Spherical => g.push(-0.5 * kernel.trace()),
    }
    Ok((value, g))
}
