//! Penalized scores `W_{k,n} = T_{k,n} − a_{k,n}` and the selection rule
//! `K̂_n = min argmax_k W_{k,n}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CovselError, Result};
use crate::fit::{fit_class, FitOptions, FitResult, FitStatus};
use crate::gauss_criterion::SampleMoments;
use crate::model_space::{validate_family, CandidateFamily};
use crate::penalties::{penalty_vector, PenaltySystem};
use crate::rng::derive_seed;

/// Default near-tie threshold is this multiple of `n`.
pub const DEFAULT_DECISIVE_FACTOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ModelStatus {
    Ok { fit: FitStatus },
    /// Best start stopped before meeting the gradient tolerance; still scored.
    NotConverged,
    /// No start produced a value; the model is excluded.
    Failed { reason: String },
}

impl ModelStatus {
    pub fn is_failed(&self) -> bool {
        matches!(self, ModelStatus::Failed { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub status: ModelStatus,
    pub result: Option<FitResult>,
}

/// Fits every model; model `k` uses the seed derived from `(opts.seed, k)`.
/// Numerical failures are recorded per model, validation failures abort.
pub fn fit_family(family: &CandidateFamily, moments: &SampleMoments, opts: &FitOptions) -> Result<Vec<ModelFit>> {
    opts.validate()?;
    let report = validate_family(family);
    if !report.is_valid() {
        return Err(CovselError::InvalidSpec(report.to_string()));
    }
    if family.p() != moments.p() {
        return Err(CovselError::InvalidArgument(format!(
            "family has p={}, data has p={}",
            family.p(),
            moments.p()
        )));
    }
    family
        .models
        .par_iter()
        .enumerate()
        .map(|(k, spec)| {
            let opts = opts.clone().with_seed(derive_seed(opts.seed, &[k as u64]));
            match fit_class(spec, moments, &opts) {
                Ok(r) => {
                    let status = match r.status {
                        FitStatus::MaxIterations => ModelStatus::NotConverged,
                        s => ModelStatus::Ok { fit: s },
                    };
                    Ok(ModelFit { status, result: Some(r) })
                }
                Err(e) if e.is_validation() => Err(e),
                Err(e) => Ok(ModelFit { status: ModelStatus::Failed { reason: e.to_string() }, result: None }),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub penalty: String,
    pub n: usize,
    /// `W_{k,n}`; `None` for excluded models.
    pub scores: Vec<Option<f64>>,
    pub t_values: Vec<Option<f64>>,
    pub penalties_applied: Vec<f64>,
    pub selected_index: usize,
    pub selected_order: usize,
    /// Best minus second-best score; `None` with a single scored model.
    pub runner_up_margin: Option<f64>,
    pub decisive: bool,
    pub model_status: Vec<ModelStatus>,
    pub excluded: Vec<usize>,
    /// Selection ran over a strict subset of the family.
    pub reduced_set: bool,
}

/// Smallest index attaining the maximum; exact comparison, `None` entries skipped.
pub fn select_from_scores(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
    }
    best.map(|(k, _)| k)
}

pub fn score_fits(
    family: &CandidateFamily,
    fits: &[ModelFit],
    system: &PenaltySystem,
    n: usize,
) -> Result<SelectionReport> {
    score_fits_with(family, fits, system, n, DEFAULT_DECISIVE_FACTOR * n as f64)
}

pub fn score_fits_with(
    family: &CandidateFamily,
    fits: &[ModelFit],
    system: &PenaltySystem,
    n: usize,
    decisive_threshold: f64,
) -> Result<SelectionReport> {
    if fits.len() != family.len() {
        return Err(CovselError::InvalidArgument("one fit per model is required".into()));
    }
    let penalties_applied = penalty_vector(system, family, n)?;
    let t_values: Vec<Option<f64>> = fits.iter().map(|f| f.result.as_ref().map(|r| r.t_value)).collect();
    let scores: Vec<Option<f64>> = t_values.iter().zip(&penalties_applied).map(|(t, a)| t.map(|t| t - a)).collect();
    let excluded: Vec<usize> = (0..fits.len()).filter(|&k| scores[k].is_none()).collect();
    let selected_index = select_from_scores(&scores)
        .ok_or_else(|| CovselError::Optimizer("every model failed to fit".into()))?;
    let best = scores[selected_index].unwrap();
    let runner_up = scores
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != selected_index)
        .filter_map(|(_, s)| *s)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
    let runner_up_margin = runner_up.map(|r| best - r);
    Ok(SelectionReport {
        penalty: system.name(),
        n,
        scores,
        t_values,
        penalties_applied,
        selected_index,
        selected_order: family.models[selected_index].order(),
        runner_up_margin,
        decisive: runner_up_margin.is_none_or(|m| m > decisive_threshold),
        model_status: fits.iter().map(|f| f.status.clone()).collect(),
        reduced_set: !excluded.is_empty(),
        excluded,
    })
}

pub fn select_model(
    family: &CandidateFamily,
    moments: &SampleMoments,
    system: &PenaltySystem,
    opts: &FitOptions,
) -> Result<SelectionReport> {
    system.validate(family)?;
    crate::penalties::model_penalty(system, family, 0, moments.n)?;
    let fits = fit_family(family, moments, opts)?;
    score_fits(family, &fits, system, moments.n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_space::{ClassBounds, ErrorType, ModelSpec};
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn min_argmax_rule() {
        assert_eq!(select_from_scores(&[Some(-10.0), Some(-10.0), Some(-12.0)]), Some(0));
        assert_eq!(select_from_scores(&[Some(-12.0), Some(-10.0), Some(-10.0)]), Some(1));
        assert_eq!(select_from_scores(&[None, Some(-3.0)]), Some(1));
        assert_eq!(select_from_scores(&[None]), None);
    }

    fn moments() -> SampleMoments {
        let cov = DMatrix::from_row_slice(3, 3, &[1.5, 0.6, 0.5, 0.6, 1.4, 0.55, 0.5, 0.55, 1.3]);
        SampleMoments::new(300, DVector::zeros(3), cov).unwrap()
    }

    #[test]
    fn single_model_is_always_selected() {
        let b = ClassBounds::new(0.05, 10.0, 10.0);
        let fam = CandidateFamily::new(vec![ModelSpec::dense(3, 1, ErrorType::Diagonal, b)], vec![6.0]);
        for sys in [PenaltySystem::Bic, PenaltySystem::Aic, PenaltySystem::Hq] {
            let r = select_model(&fam, &moments(), &sys, &FitOptions::default()).unwrap();
            assert_eq!(r.selected_index, 0);
            assert_eq!(r.runner_up_margin, None);
        }
    }

    #[test]
    fn report_orders_and_status() {
        let b = ClassBounds::new(0.05, 10.0, 10.0);
        let models: Vec<_> = (0..3).map(|q| ModelSpec::dense(3, q, ErrorType::Diagonal, b)).collect();
        let fam = CandidateFamily::with_scheme(models, crate::model_space::ComplexityScheme::DenseGauge, 0).unwrap();
        let r = select_model(&fam, &moments(), &PenaltySystem::Bic, &FitOptions::default()).unwrap();
        assert_eq!(r.selected_order, fam.models[r.selected_index].order());
        assert!(!r.reduced_set);
        assert_eq!(r.scores.len(), 3);
        let again = select_model(&fam, &moments(), &PenaltySystem::Bic, &FitOptions::default()).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn ssbic_domain_is_checked_before_fitting() {
        let b = ClassBounds::new(0.05, 10.0, 10.0);
        let fam = CandidateFamily::new(vec![ModelSpec::dense(3, 0, ErrorType::Diagonal, b)], vec![3.0]);
        let small = SampleMoments::new(10, DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert!(select_model(&fam, &small, &PenaltySystem::Ssbic, &FitOptions::default()).is_err());
    }
}
