//! Population optima `V_k`, pseudo-true sets and orders, and numerical
//! evidence for the common-projection and quadratic-margin assumptions.
//!
//! Pseudo-true sets are represented by clustered optimizer outputs. They are
//! representatives of `G_k`, not certified descriptions of it.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CovselError, Result};
use crate::fit::{fit_class_detailed, FitOptions};
use crate::gauss_criterion::{population_q, PopulationTarget, SampleMoments};
use crate::linalg;
use crate::model_space::{CandidateFamily, FactorPoint, ModelSpec};
use crate::rng::{derive_seed, rng_from};

pub const DEFAULT_EPSILON_CLUSTER: f64 = 1e-4;
pub const DEFAULT_ETA: f64 = 0.1;
/// Fewest in-ball probes needed before fitting a margin exponent.
pub const MIN_PROBES: usize = 5;
/// Largest margin exponent still read as a quadratic margin.
pub const M3_EXPONENT_LIMIT: f64 = 2.5;

pub const REPRESENTATIVE_CAVEAT: &str =
    "pseudo-true sets are clustered optimizer outputs (representatives), not certified full sets";

pub fn default_epsilon_v(v_star: f64) -> f64 {
    1e-6 * v_star.abs() + 1e-9
}

/// One clustered maximizer of `Q` within a class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representative {
    pub value: f64,
    #[serde(with = "linalg::matrix_rows")]
    pub sigma: DMatrix<f64>,
    pub point: Option<FactorPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationFit {
    pub v: f64,
    pub representatives: Vec<Representative>,
}

/// Maximizes `Q` over the class by fitting the profiled criterion with
/// `S_n = Σ₀` and `n = 1`, then clusters near-optimal starts within
/// `epsilon_cluster` (Frobenius), keeping the best member of each cluster.
pub fn population_fit(
    spec: &ModelSpec,
    target: &PopulationTarget,
    opts: &FitOptions,
    epsilon_cluster: f64,
) -> Result<PopulationFit> {
    let moments = SampleMoments::from_population(target);
    let (best, outcomes) = fit_class_detailed(spec, &moments, opts)?;
    let v = best.t_value;
    let member_tol = 1e-9 * (1.0 + v.abs());
    let mut candidates: Vec<(usize, &crate::fit::StartOutcome)> =
        outcomes.iter().enumerate().filter(|(_, o)| o.value >= v - member_tol).collect();
    candidates.sort_by(|a, b| b.1.value.total_cmp(&a.1.value).then(a.0.cmp(&b.0)));
    let mut representatives: Vec<Representative> = Vec::new();
    for (_, o) in candidates {
        if representatives.iter().all(|r| (&r.sigma - &o.sigma).norm() > epsilon_cluster) {
            representatives.push(Representative { value: o.value, sigma: o.sigma.clone(), point: o.point.clone() });
        }
    }
    Ok(PopulationFit { v, representatives })
}

/// The index sets that drive penalty classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalSets {
    pub k_star: Vec<usize>,
    pub k_zero: Vec<usize>,
    pub q_star: usize,
    pub orders: Vec<usize>,
    /// True when supplied by hand rather than computed from a population target.
    pub hypothesized: bool,
}

impl OptimalSets {
    /// Hypothesized sets; `K₀` is derived as the members of `K*` at order `q*`.
    pub fn hypothesized(orders: Vec<usize>, k_star: Vec<usize>) -> Result<Self> {
        if k_star.is_empty() || k_star.iter().any(|&k| k >= orders.len()) {
            return Err(CovselError::InvalidArgument("K* must be a nonempty set of model indices".into()));
        }
        let q_star = k_star.iter().map(|&k| orders[k]).min().unwrap();
        let k_zero = k_star.iter().copied().filter(|&k| orders[k] == q_star).collect();
        Ok(Self { k_star, k_zero, q_star, orders, hypothesized: true })
    }

    /// Exact overfits: members of `K*` above the pseudo-true order.
    pub fn overfits(&self) -> Vec<usize> {
        self.k_star.iter().copied().filter(|&k| self.orders[k] > self.q_star).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GStar {
    pub representatives: Vec<Representative>,
    /// True when `Σ₀` itself is attained, so `G* = {Σ₀}` exactly.
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub v_values: Vec<f64>,
    pub v_star: f64,
    pub k_star: Vec<usize>,
    pub q_star: usize,
    pub k_zero: Vec<usize>,
    pub k_double_star: Vec<usize>,
    pub orders: Vec<usize>,
    pub complexities: Vec<f64>,
    pub pseudo_true_reps: Vec<Vec<Representative>>,
    pub g_star: GStar,
    pub epsilon_v: f64,
    pub epsilon_cluster: f64,
    pub q_at_target: f64,
    pub caveat: String,
}

impl PopulationSummary {
    pub fn sets(&self) -> OptimalSets {
        OptimalSets {
            k_star: self.k_star.clone(),
            k_zero: self.k_zero.clone(),
            q_star: self.q_star,
            orders: self.orders.clone(),
            hypothesized: false,
        }
    }

    pub fn g_star_matrices(&self) -> Vec<DMatrix<f64>> {
        self.g_star.representatives.iter().map(|r| r.sigma.clone()).collect()
    }
}

pub fn pseudo_true_summary(
    family: &CandidateFamily,
    target: &PopulationTarget,
    epsilon_v: Option<f64>,
    opts: &FitOptions,
) -> Result<PopulationSummary> {
    pseudo_true_summary_with(family, target, epsilon_v, DEFAULT_EPSILON_CLUSTER, opts)
}

pub fn pseudo_true_summary_with(
    family: &CandidateFamily,
    target: &PopulationTarget,
    epsilon_v: Option<f64>,
    epsilon_cluster: f64,
    opts: &FitOptions,
) -> Result<PopulationSummary> {
    let report = crate::model_space::validate_family(family);
    if !report.is_valid() {
        return Err(CovselError::InvalidSpec(report.to_string()));
    }
    if family.p() != target.p() {
        return Err(CovselError::InvalidArgument("target dimension does not match the family".into()));
    }
    let fits = family
        .models
        .par_iter()
        .enumerate()
        .map(|(k, spec)| {
            let opts = opts.clone().with_seed(derive_seed(opts.seed, &[k as u64]));
            population_fit(spec, target, &opts, epsilon_cluster)
        })
        .collect::<Result<Vec<_>>>()?;
    let v_values: Vec<f64> = fits.iter().map(|f| f.v).collect();
    let v_star = v_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let epsilon_v = epsilon_v.unwrap_or_else(|| default_epsilon_v(v_star));
    let orders = family.orders();
    let k_star: Vec<usize> = (0..v_values.len()).filter(|&k| v_values[k] >= v_star - epsilon_v).collect();
    let q_star = k_star.iter().map(|&k| orders[k]).min().expect("K* is nonempty");
    let k_zero: Vec<usize> = k_star.iter().copied().filter(|&k| orders[k] == q_star).collect();
    let d_star = k_zero.iter().map(|&k| family.complexities[k]).fold(f64::INFINITY, f64::min);
    let k_double_star = k_zero.iter().copied().filter(|&k| family.complexities[k] == d_star).collect();

    let q_at_target = population_q(&target.cov, target)?;
    let mut pool: Vec<&Representative> = k_star.iter().flat_map(|&k| &fits[k].representatives).collect();
    pool.sort_by(|a, b| b.value.total_cmp(&a.value));
    let mut g_reps: Vec<Representative> = Vec::new();
    for r in pool {
        if g_reps.iter().all(|g| (&g.sigma - &r.sigma).norm() > epsilon_cluster) {
            g_reps.push(r.clone());
        }
    }
    let attains_target = (q_at_target - v_star).abs() <= epsilon_v
        && g_reps.iter().all(|r| (&r.sigma - &target.cov).norm() <= epsilon_cluster);
    let g_star = if attains_target {
        GStar {
            representatives: vec![Representative { value: q_at_target, sigma: target.cov.clone(), point: None }],
            exact: true,
        }
    } else {
        GStar { representatives: g_reps, exact: false }
    };

    Ok(PopulationSummary {
        v_values,
        v_star,
        k_star,
        q_star,
        k_zero,
        k_double_star,
        orders,
        complexities: family.complexities.clone(),
        pseudo_true_reps: fits.into_iter().map(|f| f.representatives).collect(),
        g_star,
        epsilon_v,
        epsilon_cluster,
        q_at_target,
        caveat: REPRESENTATIVE_CAVEAT.to_string(),
    })
}

pub fn hausdorff(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    let directed = |x: &[DMatrix<f64>], y: &[DMatrix<f64>]| {
        x.iter()
            .map(|u| y.iter().map(|v| (u - v).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0f64, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

pub fn distance_to_set(sigma: &DMatrix<f64>, set: &[DMatrix<f64>]) -> f64 {
    set.iter().map(|g| (sigma - g).norm()).fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Warn,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginFit {
    pub model: usize,
    pub probes_used: usize,
    pub exponent: Option<f64>,
    pub constant: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionDiagnostics {
    pub m2_hausdorff: f64,
    pub m2_threshold: f64,
    pub m2_verdict: Verdict,
    pub m3: Vec<MarginFit>,
    pub m3_exponent_limit: f64,
    pub eta: f64,
    pub caveat: String,
}

impl AssumptionDiagnostics {
    pub fn m3_exponents(&self) -> Vec<Option<f64>> {
        self.m3.iter().map(|m| m.exponent).collect()
    }

    pub fn m3_constants(&self) -> Vec<Option<f64>> {
        self.m3.iter().map(|m| m.constant).collect()
    }
}

/// Ordinary least squares `y ≈ a + b·x`; returns `(a, b)`.
pub fn least_squares_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// M2: largest pairwise Hausdorff distance between the clustered pseudo-true
/// sets of `K*`. M3: for each `k ∈ K*`, a log-log fit of `V* − Q(Σ)` against
/// `dist(Σ, G*)` over in-class probes inside the eta-ball.
pub fn diagnose_assumptions(
    family: &CandidateFamily,
    summary: &PopulationSummary,
    target: &PopulationTarget,
    probe_count: usize,
    eta: f64,
    opts: &FitOptions,
) -> Result<AssumptionDiagnostics> {
    if summary.v_values.len() != family.len() {
        return Err(CovselError::InvalidArgument("summary does not belong to this family".into()));
    }
    if !(eta > 0.0) || probe_count == 0 {
        return Err(CovselError::InvalidArgument("eta and probe_count must be positive".into()));
    }
    let sets: Vec<Vec<DMatrix<f64>>> = summary
        .k_star
        .iter()
        .map(|&k| summary.pseudo_true_reps[k].iter().map(|r| r.sigma.clone()).collect())
        .collect();
    let mut m2_hausdorff = 0.0f64;
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            m2_hausdorff = m2_hausdorff.max(hausdorff(&sets[i], &sets[j]));
        }
    }
    let m2_threshold = 10.0 * summary.epsilon_cluster;
    let m2_verdict = if m2_hausdorff <= m2_threshold { Verdict::Pass } else { Verdict::Fail };

    let g_star = summary.g_star_matrices();
    let m3 = summary
        .k_star
        .iter()
        .map(|&k| {
            let probes = margin_probes(&family.models[k], summary, k, &g_star, target, probe_count, eta, opts)?;
            Ok(margin_fit(k, &probes))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AssumptionDiagnostics {
        m2_hausdorff,
        m2_threshold,
        m2_verdict,
        m3,
        m3_exponent_limit: M3_EXPONENT_LIMIT,
        eta,
        caveat: REPRESENTATIVE_CAVEAT.to_string(),
    })
}

fn margin_fit(model: usize, probes: &[(f64, f64)]) -> MarginFit {
    if probes.len() < MIN_PROBES {
        return MarginFit { model, probes_used: probes.len(), exponent: None, constant: None, verdict: Verdict::Warn };
    }
    let x: Vec<f64> = probes.iter().map(|(d, _)| d.ln()).collect();
    let y: Vec<f64> = probes.iter().map(|(_, g)| g.ln()).collect();
    match least_squares_line(&x, &y) {
        Some((intercept, slope)) => {
            let constant = intercept.exp();
            let verdict = if slope <= M3_EXPONENT_LIMIT && constant > 0.0 { Verdict::Pass } else { Verdict::Fail };
            MarginFit { model, probes_used: probes.len(), exponent: Some(slope), constant: Some(constant), verdict }
        }
        None => MarginFit { model, probes_used: probes.len(), exponent: None, constant: None, verdict: Verdict::Warn },
    }
}

/// `(dist(Σ, G*), V* − Q(Σ))` pairs for in-class points inside the eta-ball.
#[allow(clippy::too_many_arguments)]
fn margin_probes(
    spec: &ModelSpec,
    summary: &PopulationSummary,
    k: usize,
    g_star: &[DMatrix<f64>],
    target: &PopulationTarget,
    probe_count: usize,
    eta: f64,
    opts: &FitOptions,
) -> Result<Vec<(f64, f64)>> {
    let floor = 1e-3 * eta;
    let mut out = Vec::new();
    let mut keep = |sigma: &DMatrix<f64>| -> Result<()> {
        let d = distance_to_set(sigma, g_star);
        if d > floor && d < eta {
            let gap = summary.v_star - population_q(sigma, target)?;
            if gap > 0.0 {
                out.push((d, gap));
            }
        }
        Ok(())
    };
    match spec {
        ModelSpec::ExplicitSet { matrices, .. } => {
            for m in matrices {
                keep(m)?;
            }
        }
        ModelSpec::FactorClass { pattern, error_type, bounds } => {
            let Some(base) = summary.pseudo_true_reps[k].first().and_then(|r| r.point.clone()) else {
                return Ok(out);
            };
            let x0 = base.coords(pattern);
            let n_load = pattern.len();
            for i in 0..probe_count {
                let mut rng = rng_from(opts.seed, &[0x4d33, k as u64, i as u64]);
                // log-uniform jitter scale spanning two decades below eta
                let scale = eta * 10f64.powf(-2.0 * rng.random::<f64>());
                let dir: Vec<f64> = (0..x0.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut x: Vec<f64> = x0.iter().zip(&dir).map(|(a, b)| a + scale * b / len).collect();
                let (load, psi) = x.split_at_mut(n_load);
                let norm = load.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > bounds.loading_radius {
                    load.iter_mut().for_each(|v| *v *= bounds.loading_radius / norm);
                }
                psi.iter_mut().for_each(|v| *v = bounds.clip_psi(*v));
                let point = FactorPoint::from_coords(pattern, *error_type, &x);
                keep(&point.sigma_unchecked())?;
            }
        }
    }
    Ok(out)
}

/// Curvature-derived margin constant `1/(4‖Σ₀‖²_op)` under correct specification.
pub fn margin_constant_correct_spec(target: &PopulationTarget) -> f64 {
    let op = linalg::operator_norm_sym(&target.cov);
    1.0 / (4.0 * op * op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss_criterion::d2q_form;
    use crate::model_space::{ClassBounds, ErrorType};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn generous() -> ClassBounds {
        ClassBounds::new(0.05, 10.0, 10.0)
    }

    fn factor_target() -> PopulationTarget {
        let lam = DVector::from_element(4, 0.8);
        PopulationTarget::centered(&lam * lam.transpose() + DMatrix::identity(4, 4)).unwrap()
    }

    #[test]
    fn identity_target_in_order_zero_class() {
        let t = PopulationTarget::centered(DMatrix::identity(3, 3)).unwrap();
        let fit = population_fit(&ModelSpec::dense(3, 0, ErrorType::Diagonal, generous()), &t, &FitOptions::default(), 1e-4).unwrap();
        assert_relative_eq!(fit.v, -1.5, epsilon = 1e-12);
        assert_eq!(fit.representatives.len(), 1);
        assert!((&fit.representatives[0].sigma - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn diagonal_projection_ignores_off_diagonals() {
        let t = PopulationTarget::centered(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        let fit = population_fit(&ModelSpec::dense(2, 0, ErrorType::Diagonal, generous()), &t, &FitOptions::default(), 1e-4).unwrap();
        assert_relative_eq!(fit.v, -1.0, epsilon = 1e-12);
        assert!((&fit.representatives[0].sigma - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn correct_one_factor_class_attains_ambient_maximum() {
        let t = factor_target();
        let fit = population_fit(&ModelSpec::dense(4, 1, ErrorType::Diagonal, generous()), &t, &FitOptions::default(), 1e-4).unwrap();
        let ambient = -0.5 * (linalg::log_det_spd(&t.cov).unwrap() + 4.0);
        assert_relative_eq!(fit.v, ambient, epsilon = 1e-10);
        assert!((&fit.representatives[0].sigma - &t.cov).norm() < 1e-5);
    }

    #[test]
    fn summary_of_dense_family() {
        let t = factor_target();
        let models: Vec<_> = (0..3).map(|q| ModelSpec::dense(4, q, ErrorType::Diagonal, generous())).collect();
        let fam = CandidateFamily::with_scheme(models, crate::model_space::ComplexityScheme::DenseGauge, 0).unwrap();
        let s = pseudo_true_summary(&fam, &t, None, &FitOptions::default()).unwrap();
        assert_eq!(s.k_star, vec![1, 2]);
        assert_eq!(s.q_star, 1);
        assert_eq!(s.k_zero, vec![1]);
        assert_eq!(s.k_double_star, vec![1]);
        assert!(s.v_values[0] < s.v_star);
        assert!(s.g_star.exact);
        for v in &s.v_values {
            assert!(*v <= s.q_at_target + 1e-12);
        }
    }

    #[test]
    fn single_model_and_exact_ties() {
        let t = PopulationTarget::centered(DMatrix::identity(2, 2)).unwrap();
        let spec = ModelSpec::dense(2, 0, ErrorType::Spherical, generous());
        let fam = CandidateFamily::new(vec![spec.clone()], vec![1.0]);
        let s = pseudo_true_summary(&fam, &t, None, &FitOptions::default()).unwrap();
        assert_eq!((s.k_star.clone(), s.k_zero.clone(), s.q_star), (vec![0], vec![0], 0));

        let fam = CandidateFamily::new(vec![spec.clone(), spec], vec![1.0, 1.0]);
        let s = pseudo_true_summary(&fam, &t, None, &FitOptions::default()).unwrap();
        assert_eq!(s.k_double_star, vec![0, 1]);
    }

    #[test]
    fn hypothesized_sets() {
        let sets = OptimalSets::hypothesized(vec![0, 1, 2, 3], vec![1, 2, 3]).unwrap();
        assert_eq!(sets.q_star, 1);
        assert_eq!(sets.k_zero, vec![1]);
        assert_eq!(sets.overfits(), vec![2, 3]);
        assert!(OptimalSets::hypothesized(vec![0], vec![]).is_err());
    }

    #[test]
    fn margin_constant_cases() {
        assert_relative_eq!(margin_constant_correct_spec(&PopulationTarget::centered(DMatrix::identity(3, 3)).unwrap()), 0.25);
        let two = PopulationTarget::centered(DMatrix::identity(3, 3) * 2.0).unwrap();
        assert_relative_eq!(margin_constant_correct_spec(&two), 1.0 / 16.0);
    }

    #[test]
    fn margin_constant_bounds_curvature() {
        let t = PopulationTarget::centered(DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.7])).unwrap();
        let c = margin_constant_correct_spec(&t);
        let mut rng = rng_from(5, &[]);
        for _ in 0..200 {
            let r = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let h = linalg::symmetrize(&r);
            let h = &h / h.norm();
            assert!(d2q_form(&h, &t).unwrap() <= -2.0 * c + 1e-10);
        }
    }

    #[test]
    fn hausdorff_of_singletons_is_their_distance() {
        let a = vec![DMatrix::from_element(1, 1, 0.5)];
        let b = vec![DMatrix::from_element(1, 1, 2.5)];
        assert_relative_eq!(hausdorff(&a, &b), 2.0);
        assert_eq!(hausdorff(&a, &a), 0.0);
    }

    #[test]
    fn least_squares_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.5 + 2.0 * v).collect();
        let (a, b) = least_squares_line(&x, &y).unwrap();
        assert_relative_eq!(a, 1.5, epsilon = 1e-12);
        assert_relative_eq!(b, 2.0, epsilon = 1e-12);
    }
}
