//! Candidate covariance classes `Σ = ΛΛᵀ + Ψ`, their compactness bounds and
//! complexity counts.

use nalgebra::{DMatrix, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CovselError, Result};
use crate::linalg::{self, matrix_rows_vec};
use crate::rng::rng_from;

/// Relative slack allowed when checking a point against its class bounds.
pub const FEASIBILITY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorType {
    #[serde(rename = "diag")]
    Diagonal,
    #[serde(rename = "sph")]
    Spherical,
}

impl ErrorType {
    /// Number of free uniqueness parameters.
    pub fn uniqueness_count(self, p: usize) -> usize {
        match self {
            ErrorType::Diagonal => p,
            ErrorType::Spherical => 1,
        }
    }
}

/// Positions of the loading matrix that may be nonzero, kept sorted row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportPattern {
    p: usize,
    q: usize,
    entries: Vec<(usize, usize)>,
}

impl SupportPattern {
    /// Stores the entries sorted; range and duplicate problems are reported by
    /// [`SupportPattern::violations`] rather than rejected here.
    pub fn new(p: usize, q: usize, mut entries: Vec<(usize, usize)>) -> Self {
        entries.sort_unstable();
        Self { p, q, entries }
    }

    pub fn full(p: usize, q: usize) -> Self {
        let entries = (0..p).flat_map(|r| (0..q).map(move |c| (r, c))).collect();
        Self { p, q, entries }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.p * self.q && self.violations().is_empty()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.entries.binary_search(&(row, col)).is_ok()
    }

    /// Boolean mask of shape p×q.
    pub fn mask(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.p, self.q);
        for &(r, c) in &self.entries {
            if r < self.p && c < self.q {
                m[(r, c)] = 1.0;
            }
        }
        m
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.p == 0 {
            out.push("observed dimension p must be positive".to_string());
        }
        if self.q == 0 && !self.entries.is_empty() {
            out.push("a q=0 pattern must have no entries".to_string());
        }
        for &(r, c) in &self.entries {
            if r >= self.p || c >= self.q {
                out.push(format!("support entry ({r}, {c}) out of range for p={}, q={}", self.p, self.q));
            }
        }
        for w in self.entries.windows(2) {
            if w[0] == w[1] {
                out.push(format!("duplicate support entry ({}, {})", w[0].0, w[0].1));
            }
        }
        out
    }
}

/// Compactness constants of a factor class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBounds {
    pub psi_min: f64,
    pub psi_max: f64,
    #[serde(rename = "M")]
    pub loading_radius: f64,
}

impl ClassBounds {
    pub fn new(psi_min: f64, psi_max: f64, loading_radius: f64) -> Self {
        Self { psi_min, psi_max, loading_radius }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.psi_min > 0.0) {
            out.push("psi_min must be strictly positive".to_string());
        }
        if !(self.psi_max.is_finite()) {
            out.push("psi_max must be finite".to_string());
        }
        if !(self.psi_max > self.psi_min) {
            out.push("psi_max must exceed psi_min".to_string());
        }
        if !(self.loading_radius > 0.0 && self.loading_radius.is_finite()) {
            out.push("loading radius M must be positive and finite".to_string());
        }
        out
    }

    /// Upper eigenvalue bound `M² + ψ̄` of every covariance in the class.
    pub fn max_eigenvalue(&self) -> f64 {
        self.loading_radius * self.loading_radius + self.psi_max
    }

    pub fn clip_psi(&self, v: f64) -> f64 {
        v.clamp(self.psi_min, self.psi_max)
    }
}

/// One candidate covariance class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    FactorClass {
        pattern: SupportPattern,
        error_type: ErrorType,
        bounds: ClassBounds,
    },
    /// A finite list of fixed covariance matrices.
    ExplicitSet {
        #[serde(with = "matrix_rows_vec")]
        matrices: Vec<DMatrix<f64>>,
        nominal_order: usize,
    },
}

impl ModelSpec {
    pub fn factor(pattern: SupportPattern, error_type: ErrorType, bounds: ClassBounds) -> Self {
        ModelSpec::FactorClass { pattern, error_type, bounds }
    }

    pub fn dense(p: usize, q: usize, error_type: ErrorType, bounds: ClassBounds) -> Self {
        Self::factor(SupportPattern::full(p, q), error_type, bounds)
    }

    pub fn explicit(matrices: Vec<DMatrix<f64>>, nominal_order: usize) -> Self {
        ModelSpec::ExplicitSet { matrices, nominal_order }
    }

    pub fn p(&self) -> usize {
        match self {
            ModelSpec::FactorClass { pattern, .. } => pattern.p(),
            ModelSpec::ExplicitSet { matrices, .. } => matrices.first().map_or(0, |m| m.nrows()),
        }
    }

    /// Factor order, or the nominal order of an explicit set.
    pub fn order(&self) -> usize {
        match self {
            ModelSpec::FactorClass { pattern, .. } => pattern.q(),
            ModelSpec::ExplicitSet { nominal_order, .. } => *nominal_order,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        match self {
            ModelSpec::FactorClass { pattern, bounds, .. } => {
                let mut out = pattern.violations();
                out.extend(bounds.violations());
                out
            }
            ModelSpec::ExplicitSet { matrices, .. } => {
                let mut out = Vec::new();
                if matrices.is_empty() {
                    out.push("explicit set must contain at least one matrix".to_string());
                }
                let p = self.p();
                for (i, m) in matrices.iter().enumerate() {
                    if m.nrows() != p || m.ncols() != p {
                        out.push(format!("explicit matrix {i} is not {p}x{p}"));
                    } else if !linalg::is_symmetric(m, linalg::SYMMETRY_TOL) {
                        out.push(format!("explicit matrix {i} is not symmetric"));
                    } else if linalg::cholesky(m, "explicit").is_err() {
                        out.push(format!("explicit matrix {i} is not positive definite"));
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uniqueness {
    Diagonal(Vec<f64>),
    Spherical(f64),
}

impl Uniqueness {
    pub fn error_type(&self) -> ErrorType {
        match self {
            Uniqueness::Diagonal(_) => ErrorType::Diagonal,
            Uniqueness::Spherical(_) => ErrorType::Spherical,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Uniqueness::Diagonal(v) => v,
            Uniqueness::Spherical(v) => std::slice::from_ref(v),
        }
    }

    pub fn diagonal(&self, p: usize) -> Vec<f64> {
        match self {
            Uniqueness::Diagonal(v) => v.clone(),
            Uniqueness::Spherical(v) => vec![*v; p],
        }
    }
}

/// A loading matrix together with its uniqueness parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPoint {
    #[serde(with = "linalg::matrix_rows")]
    pub loadings: DMatrix<f64>,
    pub uniqueness: Uniqueness,
}

impl FactorPoint {
    pub fn new(loadings: DMatrix<f64>, uniqueness: Uniqueness) -> Self {
        Self { loadings, uniqueness }
    }

    /// `ΛΛᵀ + Ψ` with no feasibility checks.
    pub fn sigma_unchecked(&self) -> DMatrix<f64> {
        let p = self.loadings.nrows();
        let mut s = &self.loadings * self.loadings.transpose();
        for (j, v) in self.uniqueness.diagonal(p).into_iter().enumerate() {
            s[(j, j)] += v;
        }
        s
    }

    /// Supported loadings (pattern order) followed by uniqueness values.
    pub fn coords(&self, pattern: &SupportPattern) -> Vec<f64> {
        let mut x: Vec<f64> = pattern.entries().iter().map(|&(r, c)| self.loadings[(r, c)]).collect();
        x.extend_from_slice(self.uniqueness.values());
        x
    }

    pub fn from_coords(pattern: &SupportPattern, error_type: ErrorType, x: &[f64]) -> Self {
        let mut loadings = DMatrix::zeros(pattern.p(), pattern.q());
        for (&(r, c), &v) in pattern.entries().iter().zip(x) {
            loadings[(r, c)] = v;
        }
        let rest = &x[pattern.len()..];
        let uniqueness = match error_type {
            ErrorType::Diagonal => Uniqueness::Diagonal(rest.to_vec()),
            ErrorType::Spherical => Uniqueness::Spherical(rest[0]),
        };
        Self { loadings, uniqueness }
    }

    /// Checks the point against a factor class: shapes, support mask, radius and box.
    pub fn check_feasible(&self, spec: &ModelSpec) -> Result<()> {
        let ModelSpec::FactorClass { pattern, error_type, bounds } = spec else {
            return Err(CovselError::InvalidArgument(
                "factor points only belong to factor classes".into(),
            ));
        };
        let (p, q) = (pattern.p(), pattern.q());
        if self.loadings.nrows() != p || self.loadings.ncols() != q {
            return Err(CovselError::Infeasible(format!(
                "loadings are {}x{}, class expects {p}x{q}",
                self.loadings.nrows(),
                self.loadings.ncols()
            )));
        }
        if self.uniqueness.error_type() != *error_type {
            return Err(CovselError::Infeasible("uniqueness type does not match the class".into()));
        }
        if self.uniqueness.values().len() != error_type.uniqueness_count(p) {
            return Err(CovselError::Infeasible("wrong number of uniqueness values".into()));
        }
        for r in 0..p {
            for c in 0..q {
                if self.loadings[(r, c)] != 0.0 && !pattern.contains(r, c) {
                    return Err(CovselError::Infeasible(format!("loading ({r}, {c}) is off the support")));
                }
            }
        }
        let norm = self.loadings.norm();
        if norm > bounds.loading_radius * (1.0 + FEASIBILITY_TOL) {
            return Err(CovselError::Infeasible(format!(
                "loading norm {norm} exceeds radius {}",
                bounds.loading_radius
            )));
        }
        for &v in self.uniqueness.values() {
            let slack = FEASIBILITY_TOL * bounds.psi_max;
            if !(v >= bounds.psi_min - slack && v <= bounds.psi_max + slack) {
                return Err(CovselError::Infeasible(format!(
                    "uniqueness {v} outside [{}, {}]",
                    bounds.psi_min, bounds.psi_max
                )));
            }
        }
        Ok(())
    }
}

/// Ordered candidate family with aligned complexity counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateFamily {
    pub models: Vec<ModelSpec>,
    pub complexities: Vec<f64>,
}

impl CandidateFamily {
    pub fn new(models: Vec<ModelSpec>, complexities: Vec<f64>) -> Self {
        Self { models, complexities }
    }

    /// Assigns every factor-class model its complexity under `scheme`.
    pub fn with_scheme(models: Vec<ModelSpec>, scheme: ComplexityScheme, seed: u64) -> Result<Self> {
        let complexities = models
            .iter()
            .enumerate()
            .map(|(k, m)| complexity(m, scheme, crate::rng::derive_seed(seed, &[k as u64])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { models, complexities })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn p(&self) -> usize {
        self.models.first().map_or(0, ModelSpec::p)
    }

    pub fn orders(&self) -> Vec<usize> {
        self.models.iter().map(ModelSpec::order).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending model index, `None` for family-level problems.
    pub model: Option<usize>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.violations {
            match v.model {
                Some(k) => writeln!(f, "model {k}: {}", v.message)?,
                None => writeln!(f, "family: {}", v.message)?,
            }
        }
        Ok(())
    }
}

pub fn validate_family(family: &CandidateFamily) -> ValidationReport {
    let mut violations = Vec::new();
    let mut family_level = |message: String| violations.push(Violation { model: None, message });
    if family.models.is_empty() {
        family_level("family must contain at least one model".into());
    }
    if family.complexities.len() != family.models.len() {
        family_level(format!(
            "{} complexities supplied for {} models",
            family.complexities.len(),
            family.models.len()
        ));
    }
    let p = family.p();
    for (k, m) in family.models.iter().enumerate() {
        if m.p() != p {
            violations.push(Violation {
                model: Some(k),
                message: format!("dimension mismatch: model has p={}, family has p={p}", m.p()),
            });
        }
        for message in m.violations() {
            violations.push(Violation { model: Some(k), message });
        }
        if let Some(&d) = family.complexities.get(k) {
            if !(d > 0.0 && d.is_finite()) {
                violations.push(Violation {
                    model: Some(k),
                    message: format!("complexity {d} must be positive and finite"),
                });
            }
        }
    }
    ValidationReport { violations }
}

/// Builds `Σ = ΛΛᵀ + Ψ` after checking the point against the class, and
/// verifies the spectrum lies in `[ψ̲, M² + ψ̄]`.
pub fn construct_sigma(point: &FactorPoint, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    point.check_feasible(spec)?;
    let ModelSpec::FactorClass { bounds, .. } = spec else { unreachable!() };
    let sigma = point.sigma_unchecked();
    let ev = linalg::sym_eigenvalues(&sigma);
    let slack = 1e-9 * bounds.max_eigenvalue();
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo < bounds.psi_min - slack || hi > bounds.max_eigenvalue() + slack {
        return Err(CovselError::Infeasible(format!(
            "spectrum [{lo}, {hi}] escapes [{}, {}]",
            bounds.psi_min,
            bounds.max_eigenvalue()
        )));
    }
    Ok(sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityScheme {
    /// `pq − q(q−1)/2` loading coordinates plus the uniqueness count; dense patterns only.
    DenseGauge,
    /// `|E|` plus the uniqueness count.
    RawSupport,
    /// Numerical rank of the covariance map's Jacobian at a generic point.
    JacobianRank,
    Fixed(f64),
}

pub fn complexity(spec: &ModelSpec, scheme: ComplexityScheme, seed: u64) -> Result<f64> {
    if let ComplexityScheme::Fixed(d) = scheme {
        return Ok(d);
    }
    let ModelSpec::FactorClass { pattern, error_type, bounds } = spec else {
        return Err(CovselError::InvalidArgument(
            "explicit sets need a fixed complexity".into(),
        ));
    };
    let (p, q) = (pattern.p(), pattern.q());
    let c_tau = error_type.uniqueness_count(p) as f64;
    match scheme {
        ComplexityScheme::DenseGauge => {
            if !pattern.is_full() {
                return Err(CovselError::InvalidArgument(
                    "dense_gauge complexity requires the full support pattern".into(),
                ));
            }
            let (p, q) = (p as f64, q as f64);
            Ok(p * q - q * (q - 1.0) / 2.0 + c_tau)
        }
        ComplexityScheme::RawSupport => Ok(pattern.len() as f64 + c_tau),
        ComplexityScheme::JacobianRank => jacobian_rank(pattern, *error_type, bounds, seed).map(|r| r as f64),
        ComplexityScheme::Fixed(_) => unreachable!(),
    }
}

/// Jacobian of `(Λ_E, ψ) ↦ vech(ΛΛᵀ + Ψ)`; rows follow the upper triangle.
pub fn covariance_jacobian(pattern: &SupportPattern, point: &FactorPoint) -> DMatrix<f64> {
    let p = pattern.p();
    let lam = &point.loadings;
    let rows: Vec<(usize, usize)> = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
    let n_psi = point.uniqueness.values().len();
    let mut jac = DMatrix::zeros(rows.len(), pattern.len() + n_psi);
    for (col, &(r, h)) in pattern.entries().iter().enumerate() {
        for (row, &(i, j)) in rows.iter().enumerate() {
            let mut v = 0.0;
            if i == r {
                v += lam[(j, h)];
            }
            if j == r {
                v += lam[(i, h)];
            }
            jac[(row, col)] = v;
        }
    }
    for (row, &(i, j)) in rows.iter().enumerate() {
        if i != j {
            continue;
        }
        let col = pattern.len() + if n_psi == 1 { 0 } else { i };
        jac[(row, col)] = 1.0;
    }
    jac
}

pub fn numerical_rank(m: &DMatrix<f64>, tol_factor: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let smax = sv.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = smax * tol_factor;
    sv.iter().filter(|&&s| s > tol).count()
}

const JACOBIAN_DRAWS: usize = 5;

fn jacobian_rank(pattern: &SupportPattern, error_type: ErrorType, bounds: &ClassBounds, seed: u64) -> Result<usize> {
    let p = pattern.p();
    let tol_factor = (p * (p + 1) / 2) as f64 * 1e-10;
    let mut best = 0usize;
    let mut previous = None;
    for attempt in 0..JACOBIAN_DRAWS {
        let point = random_interior_point(pattern, error_type, bounds, seed, attempt as u64)
            .ok_or_else(|| CovselError::Optimizer("could not draw an admissible interior point".into()))?;
        let rank = numerical_rank(&covariance_jacobian(pattern, &point), tol_factor);
        // generic rank is the maximum; stop once two draws agree on it
        if previous == Some(rank) && rank >= best {
            return Ok(rank);
        }
        best = best.max(rank);
        previous = Some(rank);
    }
    Ok(best)
}

/// Draws a strictly interior admissible point: masked Gaussian loadings at
/// half the radius and uniqueness values away from the box edges.
pub fn random_interior_point(
    pattern: &SupportPattern,
    error_type: ErrorType,
    bounds: &ClassBounds,
    seed: u64,
    attempt: u64,
) -> Option<FactorPoint> {
    let mut rng = rng_from(seed, &[attempt]);
    let (p, q) = (pattern.p(), pattern.q());
    let mut loadings = DMatrix::zeros(p, q);
    for &(r, c) in pattern.entries() {
        loadings[(r, c)] = rng.sample::<f64, _>(StandardNormal);
    }
    let norm = loadings.norm();
    if norm > 0.0 {
        loadings *= 0.5 * bounds.loading_radius / norm;
    } else if !pattern.is_empty() {
        return None;
    }
    let width = bounds.psi_max - bounds.psi_min;
    if !(width > 0.0) {
        return None;
    }
    let mut draw = || bounds.psi_min + width * rng.random_range(0.1..0.9);
    let uniqueness = match error_type {
        ErrorType::Diagonal => Uniqueness::Diagonal((0..p).map(|_| draw()).collect()),
        ErrorType::Spherical => Uniqueness::Spherical(draw()),
    };
    Some(FactorPoint::new(loadings, uniqueness))
}

/// Consecutive dense-gauge complexity differences `d_{q+1} − d_q` for `q < q_max`.
pub fn dense_gap_table(p: usize, q_max: usize, error_type: ErrorType) -> Result<Vec<f64>> {
    if p == 0 || q_max >= p {
        return Err(CovselError::InvalidArgument(format!(
            "q_max={q_max} must be at most p-1 (p={p})"
        )));
    }
    let bounds = ClassBounds::new(1.0, 2.0, 1.0);
    let d = |q: usize| complexity(&ModelSpec::dense(p, q, error_type, bounds), ComplexityScheme::DenseGauge, 0);
    (0..q_max).map(|q| Ok(d(q + 1)? - d(q)?)).collect()
}

/// Appends a redundant column `√θ·b·e_j` and lowers `ψ_j` by `θb²`, leaving
/// `ΛΛᵀ + Ψ` unchanged. `j` is zero-based.
pub fn redundant_representation(
    point: &FactorPoint,
    j: usize,
    b: f64,
    theta: f64,
    bounds: Option<&ClassBounds>,
) -> Result<FactorPoint> {
    let Uniqueness::Diagonal(psi) = &point.uniqueness else {
        return Err(CovselError::InvalidArgument("redundant representation needs diagonal uniqueness".into()));
    };
    let p = point.loadings.nrows();
    if j >= p {
        return Err(CovselError::InvalidArgument(format!("coordinate {j} out of range for p={p}")));
    }
    if b == 0.0 || !b.is_finite() {
        return Err(CovselError::InvalidArgument("b must be nonzero and finite".into()));
    }
    let upper = psi[j] / (b * b);
    if !(theta > 0.0 && theta < upper) {
        return Err(CovselError::InvalidArgument(format!("theta={theta} outside (0, {upper})")));
    }
    let q = point.loadings.ncols();
    let mut loadings = point.loadings.clone().insert_column(q, 0.0);
    loadings[(j, q)] = theta.sqrt() * b;
    let mut new_psi = psi.clone();
    new_psi[j] -= theta * b * b;
    let out = FactorPoint::new(loadings, Uniqueness::Diagonal(new_psi));
    if let Some(bounds) = bounds {
        let spec = ModelSpec::dense(p, q + 1, ErrorType::Diagonal, *bounds);
        out.check_feasible(&spec)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bounds() -> ClassBounds {
        ClassBounds::new(0.25, 4.0, 3.0)
    }

    #[test]
    fn dense_family_validates_clean() {
        let fam = CandidateFamily::new(vec![ModelSpec::dense(4, 1, ErrorType::Diagonal, bounds())], vec![8.0]);
        assert!(validate_family(&fam).is_valid());
    }

    #[test]
    fn zero_psi_min_is_reported() {
        let b = ClassBounds::new(0.0, 4.0, 3.0);
        let fam = CandidateFamily::new(vec![ModelSpec::dense(4, 1, ErrorType::Diagonal, b)], vec![8.0]);
        let report = validate_family(&fam);
        assert!(report.contains("psi_min must be strictly positive"));
    }

    #[test]
    fn mixed_dimensions_are_reported() {
        let fam = CandidateFamily::new(
            vec![
                ModelSpec::dense(4, 1, ErrorType::Diagonal, bounds()),
                ModelSpec::dense(5, 1, ErrorType::Diagonal, bounds()),
            ],
            vec![8.0, 10.0],
        );
        assert!(validate_family(&fam).contains("dimension mismatch"));
    }

    #[test]
    fn pattern_problems_are_reported() {
        let pat = SupportPattern::new(3, 1, vec![(0, 0), (0, 0), (5, 0)]);
        let v = pat.violations();
        assert!(v.iter().any(|m| m.contains("duplicate")));
        assert!(v.iter().any(|m| m.contains("out of range")));
        assert!(!SupportPattern::new(3, 0, vec![(0, 0)]).violations().is_empty());
    }

    #[test]
    fn explicit_set_problems_are_reported() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let spec = ModelSpec::explicit(vec![DMatrix::identity(2, 2), bad], 0);
        assert!(spec.violations().iter().any(|m| m.contains("positive definite")));
        let ragged = ModelSpec::explicit(vec![DMatrix::identity(2, 2), DMatrix::identity(3, 3)], 0);
        assert!(!ragged.violations().is_empty());
    }

    #[test]
    fn identity_and_product_cases() {
        let spec = ModelSpec::dense(3, 0, ErrorType::Diagonal, bounds());
        let pt = FactorPoint::new(DMatrix::zeros(3, 0), Uniqueness::Diagonal(vec![1.0; 3]));
        assert_eq!(construct_sigma(&pt, &spec).unwrap(), DMatrix::identity(3, 3));

        let spec = ModelSpec::dense(2, 1, ErrorType::Diagonal, bounds());
        let pt = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), Uniqueness::Diagonal(vec![0.5, 0.5]));
        let s = construct_sigma(&pt, &spec).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[1.5, 1.0, 1.0, 1.5]));
    }

    #[test]
    fn construct_rejects_infeasible_points() {
        let spec = ModelSpec::factor(SupportPattern::new(2, 1, vec![(0, 0)]), ErrorType::Diagonal, bounds());
        let off_support = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), Uniqueness::Diagonal(vec![1.0, 1.0]));
        assert!(construct_sigma(&off_support, &spec).is_err());
        let too_long = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[3.5, 0.0]), Uniqueness::Diagonal(vec![1.0, 1.0]));
        assert!(construct_sigma(&too_long, &spec).is_err());
        let low_psi = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), Uniqueness::Diagonal(vec![0.1, 1.0]));
        assert!(construct_sigma(&low_psi, &spec).is_err());
        let wrong_type = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), Uniqueness::Spherical(1.0));
        assert!(construct_sigma(&wrong_type, &spec).is_err());
    }

    #[test]
    fn dense_gauge_counts() {
        let c = |p, q, e| complexity(&ModelSpec::dense(p, q, e, bounds()), ComplexityScheme::DenseGauge, 0).unwrap();
        assert_eq!(c(6, 2, ErrorType::Diagonal), 17.0);
        assert_eq!(c(5, 0, ErrorType::Spherical), 1.0);
        let sparse = ModelSpec::factor(SupportPattern::new(3, 1, vec![(0, 0)]), ErrorType::Diagonal, bounds());
        assert!(complexity(&sparse, ComplexityScheme::DenseGauge, 0).is_err());
        assert_eq!(complexity(&sparse, ComplexityScheme::RawSupport, 0).unwrap(), 4.0);
    }

    #[test]
    fn jacobian_rank_cases() {
        let c = |p, q| complexity(&ModelSpec::dense(p, q, ErrorType::Diagonal, bounds()), ComplexityScheme::JacobianRank, 11).unwrap();
        assert_eq!(c(3, 0), 3.0);
        assert_eq!(c(4, 1), 8.0);
        // two factors on four variables: 12 coordinates minus one rotation, capped by vech size 10
        assert_eq!(c(4, 2), 10.0);
        assert_eq!(c(6, 2), 17.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let pat = SupportPattern::full(3, 2);
        let pt = random_interior_point(&pat, ErrorType::Diagonal, &bounds(), 3, 0).unwrap();
        let jac = covariance_jacobian(&pat, &pt);
        let x0 = pt.coords(&pat);
        let vech = |x: &[f64]| {
            let s = FactorPoint::from_coords(&pat, ErrorType::Diagonal, x).sigma_unchecked();
            (0..3).flat_map(|i| (i..3).map(move |j| (i, j))).map(|(i, j)| s[(i, j)]).collect::<Vec<_>>()
        };
        let h = 1e-6;
        for col in 0..x0.len() {
            let (mut xp, mut xm) = (x0.clone(), x0.clone());
            xp[col] += h;
            xm[col] -= h;
            let (fp, fm) = (vech(&xp), vech(&xm));
            for row in 0..fp.len() {
                assert_relative_eq!(jac[(row, col)], (fp[row] - fm[row]) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn gap_tables() {
        assert_eq!(dense_gap_table(6, 4, ErrorType::Diagonal).unwrap(), vec![6.0, 5.0, 4.0, 3.0]);
        assert_eq!(dense_gap_table(3, 1, ErrorType::Diagonal).unwrap(), vec![3.0]);
        assert_eq!(
            dense_gap_table(6, 5, ErrorType::Spherical).unwrap(),
            dense_gap_table(6, 5, ErrorType::Diagonal).unwrap()
        );
        assert!(dense_gap_table(4, 4, ErrorType::Diagonal).is_err());
    }

    #[test]
    fn redundant_column_example() {
        let pt = FactorPoint::new(DMatrix::zeros(3, 0), Uniqueness::Diagonal(vec![1.0; 3]));
        let out = redundant_representation(&pt, 0, 1.0, 0.5, Some(&bounds())).unwrap();
        assert_relative_eq!(out.loadings[(0, 0)], 0.5f64.sqrt());
        assert_eq!(out.loadings[(1, 0)], 0.0);
        assert_eq!(out.uniqueness, Uniqueness::Diagonal(vec![0.5, 1.0, 1.0]));
        assert!((out.sigma_unchecked() - DMatrix::identity(3, 3)).norm() < 1e-15);

        let tiny = redundant_representation(&pt, 0, 1.0, 1e-14, None).unwrap();
        assert!(tiny.loadings.norm() < 1e-6);
        assert!((tiny.uniqueness.values()[0] - 1.0).abs() < 1e-13);

        assert!(redundant_representation(&pt, 0, 1.0, 1.0, None).is_err());
        assert!(redundant_representation(&pt, 0, 2.0, 0.3, None).is_err());
        assert!(redundant_representation(&pt, 0, 1.0, -0.1, None).is_err());
    }

    #[test]
    fn patterns_are_sorted_row_major() {
        let pat = SupportPattern::new(3, 2, vec![(2, 0), (0, 1), (0, 0)]);
        assert_eq!(pat.entries(), &[(0, 0), (0, 1), (2, 0)]);
    }
}
