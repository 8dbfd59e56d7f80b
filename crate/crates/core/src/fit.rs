//! Maximization of the profiled likelihood over one candidate class.
//!
//! Factor classes are fitted by multi-start projected BFGS ascent in the
//! masked coordinates `(Λ_E, ψ)`. After every trial step the loadings are
//! rescaled onto the Frobenius ball and the uniqueness values are clipped to
//! their box, so every iterate stays inside the class. Order-zero classes and
//! explicit sets have exact solutions and bypass the iteration.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CovselError, Result};
use crate::gauss_criterion::{per_observation, value_and_gradient, SampleMoments};
use crate::linalg;
use crate::model_space::{ClassBounds, ErrorType, FactorPoint, ModelSpec, SupportPattern, Uniqueness};
use crate::rng::rng_from;

/// Largest grid the brute-force oracle will enumerate.
pub const MAX_GRID_POINTS: f64 = 1e7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub starts: usize,
    pub max_iters: usize,
    /// Bound on the projected gradient norm of `ℓ̃_n`; `None` means `1e-8·n`.
    pub grad_tolerance: Option<f64>,
    pub seed: u64,
    /// Sufficient-increase constant of the Armijo test.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            max_iters: 500,
            grad_tolerance: None,
            seed: 0,
            armijo: 1e-4,
            max_backtracks: 60,
        }
    }
}

impl FitOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn tolerance_for(&self, n: usize) -> f64 {
        self.grad_tolerance.unwrap_or(1e-8 * n as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.starts == 0 || self.max_iters == 0 {
            return Err(CovselError::InvalidArgument("starts and max_iters must be at least 1".into()));
        }
        if let Some(t) = self.grad_tolerance {
            if !(t > 0.0) {
                return Err(CovselError::InvalidArgument("grad_tolerance must be positive".into()));
            }
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(CovselError::InvalidArgument("armijo constant must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    /// Closed form or finite enumeration; no iteration involved.
    Exact,
    Converged,
    /// The best start hit `max_iters` before meeting the gradient tolerance.
    MaxIterations,
    GridSearch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Attained `T_{k,n}`.
    pub t_value: f64,
    pub best_point: Option<FactorPoint>,
    #[serde(with = "linalg::matrix_rows")]
    pub sigma: DMatrix<f64>,
    pub starts_converged: usize,
    pub gradient_norm_at_solution: f64,
    pub status: FitStatus,
    /// Index of the start (or explicit matrix) that produced the optimum.
    pub best_start: usize,
}

/// Result of one start, kept for clustering pseudo-true representatives.
#[derive(Clone, Debug)]
pub struct StartOutcome {
    pub value: f64,
    pub sigma: DMatrix<f64>,
    pub point: Option<FactorPoint>,
    pub converged: bool,
}

pub fn fit_class(spec: &ModelSpec, moments: &SampleMoments, opts: &FitOptions) -> Result<FitResult> {
    fit_class_detailed(spec, moments, opts).map(|(r, _)| r)
}

/// Like [`fit_class`] but also returns every start's outcome.
pub fn fit_class_detailed(
    spec: &ModelSpec,
    moments: &SampleMoments,
    opts: &FitOptions,
) -> Result<(FitResult, Vec<StartOutcome>)> {
    opts.validate()?;
    let violations = spec.violations();
    if !violations.is_empty() {
        return Err(CovselError::InvalidSpec(violations.join("; ")));
    }
    if spec.p() != moments.p() {
        return Err(CovselError::InvalidArgument(format!(
            "class has p={}, data has p={}",
            spec.p(),
            moments.p()
        )));
    }
    match spec {
        ModelSpec::ExplicitSet { matrices, .. } => fit_explicit(matrices, moments),
        ModelSpec::FactorClass { pattern, error_type, bounds } if pattern.q() == 0 => {
            fit_order_zero(pattern, *error_type, bounds, moments)
        }
        ModelSpec::FactorClass { pattern, error_type, bounds } => {
            fit_iterative(pattern, *error_type, bounds, moments, opts)
        }
    }
}

fn fit_explicit(matrices: &[DMatrix<f64>], moments: &SampleMoments) -> Result<(FitResult, Vec<StartOutcome>)> {
    let n = moments.n as f64;
    let outcomes = matrices
        .iter()
        .map(|m| {
            let (v, _) = per_observation(m, &moments.cov)?;
            Ok(StartOutcome { value: n * v, sigma: m.clone(), point: None, converged: true })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = argmax_first(outcomes.iter().map(|o| o.value));
    let result = FitResult {
        t_value: outcomes[best].value,
        best_point: None,
        sigma: outcomes[best].sigma.clone(),
        starts_converged: outcomes.len(),
        gradient_norm_at_solution: 0.0,
        status: FitStatus::Exact,
        best_start: best,
    };
    Ok((result, outcomes))
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// `−log ψ − s/ψ` is maximized at `ψ = s` and monotone on either side, so the
/// box solution is `clip(s)` coordinatewise (or on the pooled trace).
fn fit_order_zero(
    pattern: &SupportPattern,
    error_type: ErrorType,
    bounds: &ClassBounds,
    moments: &SampleMoments,
) -> Result<(FitResult, Vec<StartOutcome>)> {
    let p = pattern.p();
    let uniqueness = match error_type {
        ErrorType::Diagonal => Uniqueness::Diagonal(moments.cov.diagonal().iter().map(|&s| bounds.clip_psi(s)).collect()),
        ErrorType::Spherical => Uniqueness::Spherical(bounds.clip_psi(moments.cov.trace() / p as f64)),
    };
    let point = FactorPoint::new(DMatrix::zeros(p, 0), uniqueness);
    let problem = Problem { pattern, error_type, bounds, cov: &moments.cov };
    let x = point.coords(pattern);
    let (value, g) = problem.eval(&x)?;
    let n = moments.n as f64;
    let sigma = point.sigma_unchecked();
    let result = FitResult {
        t_value: n * value,
        best_point: Some(point.clone()),
        sigma: sigma.clone(),
        starts_converged: 1,
        gradient_norm_at_solution: n * norm(&problem.reduced_gradient(&x, &g)),
        status: FitStatus::Exact,
        best_start: 0,
    };
    let outcome = StartOutcome { value: n * value, sigma, point: Some(point), converged: true };
    Ok((result, vec![outcome]))
}

fn fit_iterative(
    pattern: &SupportPattern,
    error_type: ErrorType,
    bounds: &ClassBounds,
    moments: &SampleMoments,
    opts: &FitOptions,
) -> Result<(FitResult, Vec<StartOutcome>)> {
    let problem = Problem { pattern, error_type, bounds, cov: &moments.cov };
    let n = moments.n as f64;
    let tol = opts.tolerance_for(moments.n) / n;
    let mut runs = Vec::with_capacity(opts.starts);
    for start in 0..opts.starts {
        let x0 = if start == 0 {
            spectral_start(pattern, error_type, bounds, &moments.cov)
        } else {
            random_start(pattern, error_type, bounds, &moments.cov, opts.seed, start as u64)
        };
        match problem.maximize(x0, opts, tol) {
            Ok(run) if run.value.is_finite() => runs.push(Some(run)),
            _ => runs.push(None),
        }
    }
    if runs.iter().all(Option::is_none) {
        return Err(CovselError::Optimizer("every start diverged".into()));
    }
    let best = argmax_first(runs.iter().map(|r| r.as_ref().map_or(f64::NEG_INFINITY, |r| r.value)));
    let starts_converged = runs.iter().flatten().filter(|r| r.converged).count();
    let outcomes: Vec<StartOutcome> = runs
        .iter()
        .flatten()
        .map(|r| {
            let point = FactorPoint::from_coords(pattern, error_type, &r.x);
            StartOutcome { value: n * r.value, sigma: point.sigma_unchecked(), point: Some(point), converged: r.converged }
        })
        .collect();
    let run = runs[best].as_ref().expect("best start is finite");
    let point = FactorPoint::from_coords(pattern, error_type, &run.x);
    let result = FitResult {
        t_value: n * run.value,
        sigma: point.sigma_unchecked(),
        best_point: Some(point),
        starts_converged,
        gradient_norm_at_solution: n * run.grad_norm,
        status: if run.converged { FitStatus::Converged } else { FitStatus::MaxIterations },
        best_start: best,
    };
    Ok((result, outcomes))
}

/// Truncated spectral start: top-q principal directions shrunk by the mean
/// trailing eigenvalue, masked to the support, uniqueness from the residual
/// diagonal.
fn spectral_start(pattern: &SupportPattern, error_type: ErrorType, bounds: &ClassBounds, cov: &DMatrix<f64>) -> Vec<f64> {
    let (p, q) = (pattern.p(), pattern.q());
    let (values, vectors) = linalg::sym_eigen_desc(cov);
    let noise = if q < p { values[q..].iter().sum::<f64>() / (p - q) as f64 } else { 0.0 };
    let mut loadings = DMatrix::zeros(p, q);
    for c in 0..q {
        let scale = (values[c] - noise).max(1e-3 * values[c].abs()).max(1e-12).sqrt();
        for r in 0..p {
            loadings[(r, c)] = vectors[(r, c)] * scale;
        }
    }
    let loadings = loadings.component_mul(&pattern.mask());
    let resid: Vec<f64> = (0..p)
        .map(|j| cov[(j, j)] - loadings.row(j).norm_squared())
        .collect();
    let uniqueness = match error_type {
        ErrorType::Diagonal => Uniqueness::Diagonal(resid.iter().map(|&v| bounds.clip_psi(v)).collect()),
        ErrorType::Spherical => Uniqueness::Spherical(bounds.clip_psi(resid.iter().sum::<f64>() / p as f64)),
    };
    let mut x = FactorPoint::new(loadings, uniqueness).coords(pattern);
    project(&mut x, pattern.len(), bounds);
    x
}

fn random_start(
    pattern: &SupportPattern,
    error_type: ErrorType,
    bounds: &ClassBounds,
    cov: &DMatrix<f64>,
    seed: u64,
    start: u64,
) -> Vec<f64> {
    let mut rng = rng_from(seed, &[start]);
    let p = pattern.p();
    let diag: Vec<f64> = cov.diagonal().iter().map(|v| v.max(0.0)).collect();
    let avg = (diag.iter().sum::<f64>() / p as f64).max(bounds.psi_min);
    let mut x: Vec<f64> = (0..pattern.len())
        .map(|_| 0.5 * avg.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    match error_type {
        ErrorType::Diagonal => {
            for d in &diag {
                let u: f64 = rng.random_range(0.2..1.0);
                x.push(bounds.clip_psi(u * d.max(bounds.psi_min)));
            }
        }
        ErrorType::Spherical => {
            let u: f64 = rng.random_range(0.2..1.0);
            x.push(bounds.clip_psi(u * avg));
        }
    }
    project(&mut x, pattern.len(), bounds);
    x
}

/// Ball rescale for the loading block, box clip for the uniqueness block.
fn project(x: &mut [f64], n_load: usize, bounds: &ClassBounds) {
    let (load, psi) = x.split_at_mut(n_load);
    let norm = load.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > bounds.loading_radius {
        let s = bounds.loading_radius / norm;
        load.iter_mut().for_each(|v| *v *= s);
    }
    psi.iter_mut().for_each(|v| *v = bounds.clip_psi(*v));
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Problem<'a> {
    pattern: &'a SupportPattern,
    error_type: ErrorType,
    bounds: &'a ClassBounds,
    cov: &'a DMatrix<f64>,
}

struct Run {
    x: Vec<f64>,
    value: f64,
    grad_norm: f64,
    converged: bool,
}

impl Problem<'_> {
    fn n_load(&self) -> usize {
        self.pattern.len()
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let point = FactorPoint::from_coords(self.pattern, self.error_type, x);
        value_and_gradient(&point, self.pattern.entries(), self.error_type, self.cov)
    }

    fn ball_active(&self, x: &[f64]) -> bool {
        let r = self.bounds.loading_radius;
        norm(&x[..self.n_load()]) >= r * (1.0 - 1e-12)
    }

    /// KKT residual of the ascent problem: the gradient with outward-pointing
    /// components at active constraints removed.
    fn reduced_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let k = self.n_load();
        let mut r = g.to_vec();
        if k > 0 && self.ball_active(x) {
            let lam = &x[..k];
            let radial = dot(&g[..k], lam);
            if radial > 0.0 {
                let scale = radial / dot(lam, lam);
                for (ri, li) in r[..k].iter_mut().zip(lam) {
                    *ri -= scale * li;
                }
            }
        }
        let slack = 1e-12 * self.bounds.psi_max;
        for i in k..x.len() {
            let at_low = x[i] <= self.bounds.psi_min + slack && g[i] < 0.0;
            let at_high = x[i] >= self.bounds.psi_max - slack && g[i] > 0.0;
            if at_low || at_high {
                r[i] = 0.0;
            }
        }
        r
    }

    fn maximize(&self, mut x: Vec<f64>, opts: &FitOptions, tol: f64) -> Result<Run> {
        let dim = x.len();
        project(&mut x, self.n_load(), self.bounds);
        let (mut f, mut g) = self.eval(&x)?;
        let mut h = DMatrix::<f64>::identity(dim, dim);
        let mut fresh = true;
        let mut converged = false;
        let mut resid = self.reduced_gradient(&x, &g);
        for _ in 0..opts.max_iters {
            if norm(&resid) <= tol {
                converged = true;
                break;
            }
            let mut d: Vec<f64> = (&h * DVector::from_column_slice(&resid)).iter().copied().collect();
            for i in 0..dim {
                if resid[i] == 0.0 && g[i] != 0.0 && i >= self.n_load() {
                    d[i] = 0.0;
                }
            }
            if dot(&d, &resid) <= 0.0 {
                h = DMatrix::identity(dim, dim);
                fresh = true;
                d = resid.clone();
            }
            let mut accepted = None;
            let mut alpha = 1.0;
            for _ in 0..opts.max_backtracks {
                let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
                project(&mut trial, self.n_load(), self.bounds);
                let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                if norm(&step) == 0.0 {
                    break;
                }
                if let Ok((ft, gt)) = self.eval(&trial) {
                    if ft.is_finite() && ft >= f + opts.armijo * dot(&g, &step) {
                        accepted = Some((trial, step, ft, gt));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((xn, s, fnew, gnew)) = accepted else {
                if fresh {
                    break;
                }
                h = DMatrix::identity(dim, dim);
                fresh = true;
                continue;
            };
            // curvature pair for the minimization of −f
            let y: Vec<f64> = g.iter().zip(&gnew).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * norm(&s) * norm(&y) {
                if fresh {
                    h *= sy / dot(&y, &y);
                }
                bfgs_update(&mut h, &s, &y, sy);
                fresh = false;
            }
            x = xn;
            f = fnew;
            g = gnew;
            resid = self.reduced_gradient(&x, &g);
        }
        let grad_norm = norm(&resid);
        converged |= grad_norm <= tol;
        Ok(Run { x, value: f, grad_norm, converged })
    }
}

/// Inverse-Hessian BFGS update `H ← (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ`.
fn bfgs_update(h: &mut DMatrix<f64>, s: &[f64], y: &[f64], sy: f64) {
    let rho = 1.0 / sy;
    let s = DVector::from_column_slice(s);
    let y = DVector::from_column_slice(y);
    let hy = &*h * &y;
    let yhy = y.dot(&hy);
    let update = (&s * s.transpose()) * (rho * (1.0 + rho * yhy)) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
    *h += update;
}

/// Exhaustive grid oracle: every supported loading on a uniform grid of
/// `[−M, M]` (projected onto the ball) crossed with uniqueness grids on
/// `[ψ̲, ψ̄]`.
pub fn brute_force_fit(spec: &ModelSpec, moments: &SampleMoments, grid_per_axis: usize) -> Result<FitResult> {
    let ModelSpec::FactorClass { pattern, error_type, bounds } = spec else {
        return Err(CovselError::InvalidArgument("brute force needs a factor class".into()));
    };
    let violations = spec.violations();
    if !violations.is_empty() {
        return Err(CovselError::InvalidSpec(violations.join("; ")));
    }
    if grid_per_axis == 0 {
        return Err(CovselError::InvalidArgument("grid_per_axis must be positive".into()));
    }
    let p = pattern.p();
    let n_load = pattern.len();
    let n_psi = error_type.uniqueness_count(p);
    let size = (grid_per_axis as f64).powi((n_load + n_psi) as i32);
    if size > MAX_GRID_POINTS {
        return Err(CovselError::GridTooLarge { size, limit: MAX_GRID_POINTS });
    }
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        if grid_per_axis == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..grid_per_axis).map(|i| lo + (hi - lo) * i as f64 / (grid_per_axis - 1) as f64).collect()
    };
    let load_axis = axis(-bounds.loading_radius, bounds.loading_radius);
    let psi_axis = axis(bounds.psi_min, bounds.psi_max);
    let cov: Vec<f64> = moments.cov.iter().copied().collect();
    let mut scratch = FastEval::new(p);

    let mut best_value = f64::NEG_INFINITY;
    let mut best_x = Vec::new();
    let mut load_idx = vec![0usize; n_load];
    let mut lam = vec![0.0; n_load];
    let mut base = vec![0.0; p * p];
    loop {
        for (v, &i) in lam.iter_mut().zip(&load_idx) {
            *v = load_axis[i];
        }
        project(&mut lam, n_load, bounds);
        base.iter_mut().for_each(|v| *v = 0.0);
        for (a, &(ra, ca)) in pattern.entries().iter().enumerate() {
            for (b, &(rb, cb)) in pattern.entries().iter().enumerate() {
                if ca == cb {
                    base[ra * p + rb] += lam[a] * lam[b];
                }
            }
        }
        let mut psi_idx = vec![0usize; n_psi];
        loop {
            let value = scratch.eval(&base, |j| psi_axis[psi_idx[if n_psi == 1 { 0 } else { j }]], &cov);
            if let Some(v) = value {
                if v > best_value {
                    best_value = v;
                    best_x = lam.clone();
                    best_x.extend(psi_idx.iter().map(|&i| psi_axis[i]));
                }
            }
            if !odometer(&mut psi_idx, grid_per_axis) {
                break;
            }
        }
        if !odometer(&mut load_idx, grid_per_axis) {
            break;
        }
    }
    if !best_value.is_finite() {
        return Err(CovselError::Optimizer("no finite grid value".into()));
    }
    let point = FactorPoint::from_coords(pattern, *error_type, &best_x);
    let problem = Problem { pattern, error_type: *error_type, bounds, cov: &moments.cov };
    let (value, g) = problem.eval(&best_x)?;
    let n = moments.n as f64;
    Ok(FitResult {
        t_value: n * value,
        sigma: point.sigma_unchecked(),
        best_point: Some(point),
        starts_converged: 0,
        gradient_norm_at_solution: n * norm(&problem.reduced_gradient(&best_x, &g)),
        status: FitStatus::GridSearch,
        best_start: 0,
    })
}

fn odometer(idx: &mut [usize], base: usize) -> bool {
    for i in idx.iter_mut() {
        *i += 1;
        if *i < base {
            return true;
        }
        *i = 0;
    }
    false
}

/// Allocation-free per-observation criterion for small `p`.
struct FastEval {
    p: usize,
    l: Vec<f64>,
    y: Vec<f64>,
}

impl FastEval {
    fn new(p: usize) -> Self {
        Self { p, l: vec![0.0; p * p], y: vec![0.0; p * p] }
    }

    /// `−½{log det(B + diag ψ) + tr(S (B + diag ψ)⁻¹)}`; `None` when not PD.
    fn eval(&mut self, base: &[f64], psi: impl Fn(usize) -> f64, cov: &[f64]) -> Option<f64> {
        let p = self.p;
        let l = &mut self.l;
        l.copy_from_slice(base);
        for j in 0..p {
            l[j * p + j] += psi(j);
        }
        // in-place lower Cholesky
        let mut log_det = 0.0;
        for j in 0..p {
            let mut d = l[j * p + j];
            for k in 0..j {
                d -= l[j * p + k] * l[j * p + k];
            }
            if !(d > 0.0) {
                return None;
            }
            let d = d.sqrt();
            l[j * p + j] = d;
            log_det += 2.0 * d.ln();
            for i in (j + 1)..p {
                let mut v = l[i * p + j];
                for k in 0..j {
                    v -= l[i * p + k] * l[j * p + k];
                }
                l[i * p + j] = v / d;
            }
        }
        // tr(Σ⁻¹S) = ‖L⁻¹ S L⁻ᵀ‖ trace; solve L Y = S then accumulate trace of L⁻¹ Yᵀ
        let y = &mut self.y;
        for c in 0..p {
            for i in 0..p {
                let mut v = cov[i + c * p];
                for k in 0..i {
                    v -= l[i * p + k] * y[k * p + c];
                }
                y[i * p + c] = v / l[i * p + i];
            }
        }
        // Z = L⁻¹ Yᵀ, trace(Z) = tr(L⁻¹ S L⁻ᵀ)
        let mut trace = 0.0;
        let mut z = vec![0.0; p];
        for c in 0..p {
            for i in 0..p {
                let mut v = y[c * p + i];
                for k in 0..i {
                    v -= l[i * p + k] * z[k];
                }
                z[i] = v / l[i * p + i];
            }
            trace += z[c];
        }
        Some(-0.5 * (log_det + trace))
    }
}
