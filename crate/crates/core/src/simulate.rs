//! Data generation, Monte Carlo selection experiments, likelihood-gain traces
//! and two constructions where consistency or the quadratic margin breaks.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{CovselError, Result};
use crate::fit::{fit_class, FitOptions};
use crate::gauss_criterion::{compute_moments, population_q, profiled_loglik, q_gradient, PopulationTarget};
use crate::linalg::{self, cholesky};
use crate::model_space::{CandidateFamily, ModelSpec};
use crate::penalties::PenaltySystem;
use crate::population::{least_squares_line, pseudo_true_summary, PopulationSummary};
use crate::rng::{derive_seed, rng_from};
use crate::select::{fit_family, score_fits, SelectionReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LawShape {
    Gaussian,
    /// Multivariate t rescaled to unit covariance; needs `dof > 4`.
    StudentT { dof: f64 },
    /// Variance `levels[0]` with probability `weight`, else `levels[1]`,
    /// normalized to unit mean.
    ScaleMixture { weight: f64, levels: [f64; 2] },
}

/// An iid law with exact mean `mean` and covariance `cov`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataLaw {
    #[serde(flatten)]
    pub shape: LawShape,
    #[serde(with = "linalg::vector_plain")]
    pub mean: DVector<f64>,
    #[serde(with = "linalg::matrix_rows")]
    pub cov: DMatrix<f64>,
}

impl DataLaw {
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { shape: LawShape::Gaussian, mean, cov }
    }

    pub fn centered_gaussian(cov: DMatrix<f64>) -> Self {
        Self::gaussian(DVector::zeros(cov.nrows()), cov)
    }

    pub fn p(&self) -> usize {
        self.mean.len()
    }

    pub fn target(&self) -> Result<PopulationTarget> {
        PopulationTarget::new(self.mean.clone(), self.cov.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.target()?;
        match self.shape {
            LawShape::Gaussian => Ok(()),
            LawShape::StudentT { dof } if dof > 4.0 => Ok(()),
            LawShape::StudentT { dof } => Err(CovselError::InvalidArgument(format!(
                "student-t needs dof > 4 for a finite fourth moment, got {dof}"
            ))),
            LawShape::ScaleMixture { weight, levels } => {
                if !(weight > 0.0 && weight < 1.0) || !levels.iter().all(|l| *l > 0.0 && l.is_finite()) {
                    return Err(CovselError::InvalidArgument(
                        "scale mixture needs a weight in (0, 1) and positive levels".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// `n` draws as rows, deterministic in `(law, n, seed)`.
pub fn generate_data(law: &DataLaw, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    law.validate()?;
    if n == 0 {
        return Err(CovselError::InvalidArgument("n must be positive".into()));
    }
    let p = law.p();
    let l = cholesky(&law.cov, "law covariance")?.l();
    let mut rng = rng_from(seed, &[]);
    let chi = match law.shape {
        LawShape::StudentT { dof } => Some((ChiSquared::new(dof).expect("dof > 4"), dof)),
        _ => None,
    };
    let mix = match law.shape {
        LawShape::ScaleMixture { weight, levels } => {
            let m = weight * levels[0] + (1.0 - weight) * levels[1];
            Some((weight, levels[0] / m, levels[1] / m))
        }
        _ => None,
    };
    let mut out = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(p);
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let scale = if let Some((dist, dof)) = &chi {
            let w: f64 = dist.sample(&mut rng);
            ((dof - 2.0) / w).sqrt()
        } else if let Some((weight, a, b)) = mix {
            if rng.random::<f64>() < weight { a.sqrt() } else { b.sqrt() }
        } else {
            1.0
        };
        let x = &l * &z * scale + &law.mean;
        out.row_mut(i).copy_from(&x.transpose());
    }
    Ok(out)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the `n − 1` divisor.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

/// Exact (Clopper–Pearson) two-sided interval for a binomial proportion.
pub fn clopper_pearson(successes: usize, trials: usize, level: f64) -> (f64, f64) {
    let alpha = 1.0 - level;
    let (x, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 { 0.0 } else { Beta::new(x, n - x + 1.0).unwrap().inverse_cdf(alpha / 2.0) };
    let hi = if successes == trials { 1.0 } else { Beta::new(x + 1.0, n - x).unwrap().inverse_cdf(1.0 - alpha / 2.0) };
    (lo, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloPlan {
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub law: DataLaw,
    pub family: CandidateFamily,
    pub systems: Vec<PenaltySystem>,
}

impl MonteCarloPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CovselError::InvalidArgument("n_grid must be nonempty and strictly increasing".into()));
        }
        if self.replications == 0 || self.systems.is_empty() {
            return Err(CovselError::InvalidArgument("replications and systems must be nonempty".into()));
        }
        self.law.validate()?;
        if self.law.p() != self.family.p() {
            return Err(CovselError::InvalidArgument("law and family dimensions differ".into()));
        }
        for s in &self.systems {
            s.validate(&self.family)?;
        }
        Ok(())
    }

    /// Seed of replication `r` at sample size `n`.
    pub fn cell_seed(&self, r: usize, n: usize) -> u64 {
        derive_seed(self.seed, &[r as u64, n as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFrequency {
    pub order: usize,
    pub count: usize,
    pub frequency: f64,
    pub ci99: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub system: String,
    pub n: usize,
    pub orders: Vec<OrderFrequency>,
    pub model_frequencies: Vec<f64>,
    pub mean_margin: Option<f64>,
    pub median_margin: Option<f64>,
    /// Selections whose runner-up margin fell below `1e-6·n`.
    pub fragile: usize,
    pub reduced_set: usize,
}

impl McCell {
    pub fn order_frequency(&self, order: usize) -> f64 {
        self.orders.iter().find(|o| o.order == order).map_or(0.0, |o| o.frequency)
    }

    pub fn order_count(&self, order: usize) -> usize {
        self.orders.iter().find(|o| o.order == order).map_or(0, |o| o.count)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub seed: u64,
    pub replications: usize,
    pub n_grid: Vec<usize>,
    pub cells: Vec<McCell>,
    /// `replication_seeds[i][r]` seeds replication `r` at `n_grid[i]`.
    pub replication_seeds: Vec<Vec<u64>>,
}

impl McReport {
    pub fn cell(&self, system: &str, n: usize) -> Option<&McCell> {
        self.cells.iter().find(|c| c.system == system && c.n == n)
    }

    /// Flat `system,n,order,frequency` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("system,n,order,frequency\n");
        for c in &self.cells {
            for o in &c.orders {
                s.push_str(&format!("{},{},{},{}\n", c.system, c.n, o.order, o.frequency));
            }
        }
        s
    }
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CovselError::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn run_monte_carlo(plan: &MonteCarloPlan, opts: &FitOptions) -> Result<McReport> {
    plan.validate()?;
    opts.validate()?;
    let cells: Vec<(usize, usize)> =
        (0..plan.n_grid.len()).flat_map(|i| (0..plan.replications).map(move |r| (i, r))).collect();
    let outcomes: Vec<Vec<SelectionReport>> = cells
        .par_iter()
        .map(|&(i, r)| {
            let n = plan.n_grid[i];
            let seed = plan.cell_seed(r, n);
            let moments = compute_moments(&generate_data(&plan.law, n, seed)?)?;
            let fits = fit_family(&plan.family, &moments, &opts.clone().with_seed(seed))?;
            plan.systems.iter().map(|s| score_fits(&plan.family, &fits, s, n)).collect()
        })
        .collect::<Result<_>>()?;

    let orders: BTreeSet<usize> = plan.family.orders().into_iter().collect();
    let mut report_cells = Vec::new();
    for (si, system) in plan.systems.iter().enumerate() {
        for (i, &n) in plan.n_grid.iter().enumerate() {
            let reps: Vec<&SelectionReport> =
                (0..plan.replications).map(|r| &outcomes[i * plan.replications + r][si]).collect();
            let total = reps.len();
            let mut model_counts = vec![0usize; plan.family.len()];
            for rep in &reps {
                model_counts[rep.selected_index] += 1;
            }
            let order_freqs = orders
                .iter()
                .map(|&q| {
                    let count = reps.iter().filter(|r| r.selected_order == q).count();
                    OrderFrequency { order: q, count, frequency: count as f64 / total as f64, ci99: clopper_pearson(count, total, 0.99) }
                })
                .collect();
            let margins: Vec<f64> = reps.iter().filter_map(|r| r.runner_up_margin).collect();
            report_cells.push(McCell {
                system: system.name(),
                n,
                orders: order_freqs,
                model_frequencies: model_counts.iter().map(|&c| c as f64 / total as f64).collect(),
                mean_margin: (!margins.is_empty()).then(|| mean(&margins)),
                median_margin: (!margins.is_empty()).then(|| median(&margins)),
                fragile: reps.iter().filter(|r| !r.decisive).count(),
                reduced_set: reps.iter().filter(|r| r.reduced_set).count(),
            });
        }
    }
    Ok(McReport {
        seed: plan.seed,
        replications: plan.replications,
        n_grid: plan.n_grid.clone(),
        cells: report_cells,
        replication_seeds: plan
            .n_grid
            .iter()
            .map(|&n| (0..plan.replications).map(|r| plan.cell_seed(r, n)).collect())
            .collect(),
    })
}

/// `U_n = sup_{Σ ∈ G*} ℓ̃_n(Σ)` over the pseudo-true representatives.
fn u_n(summary: &PopulationSummary, moments: &crate::gauss_criterion::SampleMoments) -> Result<f64> {
    summary
        .g_star
        .representatives
        .iter()
        .map(|r| profiled_loglik(&r.sigma, moments))
        .try_fold(f64::NEG_INFINITY, |acc, v| v.map(|v| acc.max(v)))
}

/// `T_{k,n} − U_n` for each replication at each `n`.
fn gain_samples(
    family: &CandidateFamily,
    law: &DataLaw,
    summary: &PopulationSummary,
    k: usize,
    n_grid: &[usize],
    replications: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<Vec<Vec<f64>>> {
    n_grid
        .iter()
        .map(|&n| {
            (0..replications)
                .into_par_iter()
                .map(|r| {
                    let cell = derive_seed(seed, &[r as u64, n as u64]);
                    let moments = compute_moments(&generate_data(law, n, cell)?)?;
                    let fit_opts = opts.clone().with_seed(derive_seed(cell, &[k as u64]));
                    let t = fit_class(&family.models[k], &moments, &fit_opts)?.t_value;
                    Ok(t - u_n(summary, &moments)?)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

fn check_trace_inputs(family: &CandidateFamily, law: &DataLaw, k: usize, n_grid: &[usize], replications: usize) -> Result<()> {
    law.validate()?;
    if k >= family.len() {
        return Err(CovselError::InvalidArgument(format!("model index {k} out of range")));
    }
    if n_grid.is_empty() || replications == 0 {
        return Err(CovselError::InvalidArgument("n_grid and replications must be nonempty".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub n: usize,
    pub gains: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub min: f64,
    pub median_over_log_n: f64,
    pub median_over_loglog_n: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitGainTrace {
    pub model: usize,
    /// `½(d_k − d*)`, the BIC gap coefficient of the overfit.
    pub half_complexity_gap: f64,
    pub g_star_exact: bool,
    pub rows: Vec<GainRow>,
    /// Least-squares slope of `median / log log n` against `log n`.
    pub loglog_ratio_slope: Option<f64>,
}

pub fn overfit_gain_trace(
    family: &CandidateFamily,
    law: &DataLaw,
    k_overfit: usize,
    n_grid: &[usize],
    replications: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<OverfitGainTrace> {
    check_trace_inputs(family, law, k_overfit, n_grid, replications)?;
    let summary = pseudo_true_summary(family, &law.target()?, None, opts)?;
    if !summary.k_star.contains(&k_overfit) || summary.orders[k_overfit] <= summary.q_star {
        return Err(CovselError::InvalidArgument(format!(
            "model {k_overfit} is not an exact overfit (K* = {:?}, q* = {})",
            summary.k_star, summary.q_star
        )));
    }
    let samples = gain_samples(family, law, &summary, k_overfit, n_grid, replications, seed, opts)?;
    let rows: Vec<GainRow> = n_grid
        .iter()
        .zip(samples)
        .map(|(&n, gains)| {
            let med = median(&gains);
            let ln = (n as f64).ln();
            GainRow {
                n,
                median: med,
                mean: mean(&gains),
                min: gains.iter().copied().fold(f64::INFINITY, f64::min),
                median_over_log_n: med / ln,
                median_over_loglog_n: med / ln.ln(),
                gains,
            }
        })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.median_over_loglog_n).collect();
    let d_star = summary.k_zero.iter().map(|&k| family.complexities[k]).fold(f64::INFINITY, f64::min);
    Ok(OverfitGainTrace {
        model: k_overfit,
        half_complexity_gap: 0.5 * (family.complexities[k_overfit] - d_star),
        g_star_exact: summary.g_star.exact,
        rows,
        loglog_ratio_slope: least_squares_line(&x, &y).map(|(_, b)| b),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub n: usize,
    pub mean_ratio: f64,
    pub sd_ratio: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalLossTrace {
    pub model: usize,
    /// `−(V* − V_k)`, the limit of `(T_{k,n} − U_n)/n`.
    pub limit: f64,
    pub rows: Vec<LossRow>,
}

pub fn suboptimal_loss_trace(
    family: &CandidateFamily,
    law: &DataLaw,
    k_sub: usize,
    n_grid: &[usize],
    replications: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<SuboptimalLossTrace> {
    check_trace_inputs(family, law, k_sub, n_grid, replications)?;
    let summary = pseudo_true_summary(family, &law.target()?, None, opts)?;
    if summary.k_star.contains(&k_sub) {
        return Err(CovselError::InvalidArgument(format!("model {k_sub} is globally optimal, not suboptimal")));
    }
    let limit = -(summary.v_star - summary.v_values[k_sub]);
    let samples = gain_samples(family, law, &summary, k_sub, n_grid, replications, seed, opts)?;
    let rows = n_grid
        .iter()
        .zip(samples)
        .map(|(&n, gains)| {
            let ratios: Vec<f64> = gains.iter().map(|g| g / n as f64).collect();
            let m = mean(&ratios);
            LossRow {
                n,
                mean_ratio: m,
                sd_ratio: if ratios.len() > 1 { std_dev(&ratios) } else { 0.0 },
                relative_error: ((m - limit) / limit).abs(),
            }
        })
        .collect();
    Ok(SuboptimalLossTrace { model: k_sub, limit, rows })
}

fn level_fn(s: f64) -> f64 {
    s.ln() + 1.0 / s
}

/// The unique `σ₊ > 1` with `log σ₊ + 1/σ₊ = log σ₋ + 1/σ₋`.
pub fn sigma_plus(sigma_minus: f64) -> Result<f64> {
    if !(sigma_minus > 0.0 && sigma_minus < 1.0) {
        return Err(CovselError::InvalidArgument(format!("sigma_minus must lie in (0, 1), got {sigma_minus}")));
    }
    let target = level_fn(sigma_minus);
    let (mut lo, mut hi) = (1.0f64, 2.0f64);
    while level_fn(hi) < target {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(CovselError::RootFinding("no upper bracket for sigma_plus".into()));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if level_fn(mid) < target { lo = mid } else { hi = mid }
    }
    let root = 0.5 * (lo + hi);
    if (hi - lo) > 1e-12 * root.max(1.0) || (level_fn(root) - target).abs() > 1e-12 * target.max(1.0) {
        return Err(CovselError::RootFinding(format!("bisection for sigma_plus stalled at {root}")));
    }
    Ok(root)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemFrequencies {
    pub system: String,
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathologyRow {
    pub n: usize,
    pub contrast_mean: f64,
    pub contrast_over_sqrt_n_sd: f64,
    pub identity_max_error: f64,
    pub selections: Vec<SystemFrequencies>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathologyReport {
    pub sigma_minus: f64,
    pub sigma_plus: f64,
    /// Common value of `Q` at both singletons under `Σ₀ = 1`.
    pub q_value: f64,
    /// `(σ₋⁻¹ − σ₊⁻¹)/√2`, the limiting sd of contrast/√n.
    pub predicted_sd: f64,
    pub identity_holds: bool,
    pub rows: Vec<PathologyRow>,
}

pub const PATHOLOGY_IDENTITY_TOL: f64 = 1e-8;

/// The two-singleton family `{σ₋}`, `{σ₊}` with equal complexities.
pub fn two_point_family(sigma_minus: f64) -> Result<CandidateFamily> {
    let sp = sigma_plus(sigma_minus)?;
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    Ok(CandidateFamily::new(
        vec![ModelSpec::explicit(vec![one(sigma_minus)], 0), ModelSpec::explicit(vec![one(sp)], 1)],
        vec![1.0, 1.0],
    ))
}

pub fn pathology_two_point(
    sigma_minus: f64,
    n_grid: &[usize],
    replications: usize,
    seed: u64,
    systems: &[PenaltySystem],
) -> Result<PathologyReport> {
    if n_grid.is_empty() || replications < 2 || systems.is_empty() {
        return Err(CovselError::InvalidArgument("need a grid, at least two replications and a system".into()));
    }
    let sp = sigma_plus(sigma_minus)?;
    let family = two_point_family(sigma_minus)?;
    let law = DataLaw::centered_gaussian(DMatrix::identity(1, 1));
    let coef = 1.0 / sigma_minus - 1.0 / sp;
    let rows = n_grid
        .iter()
        .map(|&n| {
            let per_rep: Vec<(f64, f64, Vec<usize>)> = (0..replications)
                .into_par_iter()
                .map(|r| {
                    let moments = compute_moments(&generate_data(&law, n, derive_seed(seed, &[r as u64, n as u64]))?)?;
                    let fits = fit_family(&family, &moments, &FitOptions::default())?;
                    let t: Vec<f64> = fits.iter().map(|f| f.result.as_ref().unwrap().t_value).collect();
                    let contrast = t[0] - t[1];
                    let closed = -0.5 * n as f64 * (moments.cov[(0, 0)] - 1.0) * coef;
                    let picks = systems
                        .iter()
                        .map(|s| score_fits(&family, &fits, s, n).map(|r| r.selected_index))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((contrast, (contrast - closed).abs(), picks))
                })
                .collect::<Result<_>>()?;
            let scaled: Vec<f64> = per_rep.iter().map(|(c, _, _)| c / (n as f64).sqrt()).collect();
            let selections = systems
                .iter()
                .enumerate()
                .map(|(si, s)| {
                    let mut counts = vec![0usize; 2];
                    per_rep.iter().for_each(|(_, _, picks)| counts[picks[si]] += 1);
                    SystemFrequencies {
                        system: s.name(),
                        frequencies: counts.iter().map(|&c| c as f64 / replications as f64).collect(),
                        counts,
                    }
                })
                .collect();
            Ok(PathologyRow {
                n,
                contrast_mean: mean(&per_rep.iter().map(|(c, _, _)| *c).collect::<Vec<_>>()),
                contrast_over_sqrt_n_sd: std_dev(&scaled),
                identity_max_error: per_rep.iter().map(|(_, e, _)| *e).fold(0.0, f64::max),
                selections,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathologyReport {
        sigma_minus,
        sigma_plus: sp,
        q_value: -0.5 * level_fn(sigma_minus),
        predicted_sd: coef / std::f64::consts::SQRT_2,
        identity_holds: rows.iter().all(|r| r.identity_max_error <= PATHOLOGY_IDENTITY_TOL),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatMarginClass {
    pub spec: ModelSpec,
    pub t_values: Vec<f64>,
    /// `|Q(ζ(t)) − Q(Σ*)|` per `t`.
    pub level_residuals: Vec<f64>,
    pub level: f64,
    #[serde(with = "linalg::matrix_rows")]
    pub tangent: DMatrix<f64>,
    #[serde(with = "linalg::matrix_rows")]
    pub corrector: DMatrix<f64>,
}

pub const LEVEL_RESIDUAL_TOL: f64 = 1e-10;

/// Samples `γ(t) = ζ(t) + t⁴H` where `ζ` stays on the `Q`-level set of `Σ*`.
/// The class attains its maximum at `Σ*` with a quartic rather than
/// quadratic margin. The curve is sampled at `t_grid` plus `curve_points`
/// evenly spaced values on `[−δ, δ]`, `δ = max |t_grid|`.
pub fn build_flat_margin_class(
    target: &PopulationTarget,
    sigma_star: &DMatrix<f64>,
    t_grid: &[f64],
    curve_points: usize,
    seed: u64,
) -> Result<FlatMarginClass> {
    let p = target.p();
    if p < 2 {
        return Err(CovselError::InvalidArgument("the flat-margin construction needs p >= 2".into()));
    }
    if sigma_star.nrows() != p || !linalg::is_symmetric(sigma_star, linalg::SYMMETRY_TOL) {
        return Err(CovselError::InvalidArgument("sigma_star must be a symmetric p×p matrix".into()));
    }
    if t_grid.is_empty() || curve_points == 0 {
        return Err(CovselError::InvalidArgument("t_grid and curve_points must be nonempty".into()));
    }
    let level = population_q(sigma_star, target)?;
    let d = q_gradient(sigma_star, target)?;
    let dn = d.norm();
    if dn <= 1e-12 {
        return Err(CovselError::InvalidArgument("DQ vanishes at sigma_star (sigma_star equals the target)".into()));
    }
    let g = &d * (-1.0 / dn);
    let mut rng = rng_from(seed, &[]);
    let r = linalg::symmetrize(&DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal)));
    let t_dir = &r - &d * (linalg::trace_product(&r, &d) / (dn * dn));
    let t_dir = &t_dir / t_dir.norm();

    let delta = t_grid.iter().fold(0.0f64, |a, t| a.max(t.abs()));
    let mut ts: Vec<f64> = t_grid.to_vec();
    ts.push(0.0);
    if curve_points > 1 {
        ts.extend((0..curve_points).map(|i| -delta + 2.0 * delta * i as f64 / (curve_points - 1) as f64));
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let phi = |t: f64, s: f64| -> Option<f64> {
        let m = sigma_star + &t_dir * t + &g * s;
        population_q(&m, target).ok().map(|q| q - level)
    };
    let mut matrices = Vec::with_capacity(ts.len());
    let mut residuals = Vec::with_capacity(ts.len());
    for &t in &ts {
        let s = level_root(|s| phi(t, s)).ok_or_else(|| {
            CovselError::RootFinding(format!("no level-curve correction found at t = {t}"))
        })?;
        let zeta = sigma_star + &t_dir * t + &g * s;
        let resid = (population_q(&zeta, target)? - level).abs();
        if resid >= LEVEL_RESIDUAL_TOL {
            return Err(CovselError::RootFinding(format!("level residual {resid:e} at t = {t}")));
        }
        let gamma = linalg::symmetrize(&(zeta + &g * t.powi(4)));
        cholesky(&gamma, "flat-margin curve point")
            .map_err(|_| CovselError::RootFinding(format!("curve leaves the PD cone at t = {t}")))?;
        matrices.push(gamma);
        residuals.push(resid);
    }
    Ok(FlatMarginClass {
        spec: ModelSpec::explicit(matrices, 1),
        t_values: ts,
        level_residuals: residuals,
        level,
        tangent: t_dir,
        corrector: g,
    })
}

/// Root of a locally decreasing `φ` near `s = 0`, bracketed outward then bisected.
fn level_root(phi: impl Fn(f64) -> Option<f64>) -> Option<f64> {
    let f0 = phi(0.0)?;
    if f0 == 0.0 {
        return Some(0.0);
    }
    let dir = if f0 > 0.0 { 1.0 } else { -1.0 };
    let mut step = 1e-6;
    let (mut a, mut b) = (0.0, 0.0);
    let mut found = false;
    for _ in 0..80 {
        b = dir * step;
        match phi(b) {
            Some(v) if v.signum() != f0.signum() => {
                found = true;
                break;
            }
            Some(_) => a = b,
            None => return None,
        }
        step *= 2.0;
    }
    if !found {
        return None;
    }
    let fa_sign = f0.signum();
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            break;
        }
        let v = phi(mid)?;
        if v == 0.0 {
            return Some(mid);
        }
        if v.signum() == fa_sign { a = mid } else { b = mid }
    }
    let (fa, fb) = (phi(a)?.abs(), phi(b)?.abs());
    Some(if fa <= fb { a } else { b })
}
