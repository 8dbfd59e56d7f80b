//! JSON documents for families, targets and Monte Carlo plans, and CSV data.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CovselError, Result};
use crate::gauss_criterion::{PopulationTarget, SampleMoments};
use crate::linalg::matrix_from_rows;
use crate::model_space::{
    validate_family, CandidateFamily, ClassBounds, ComplexityScheme, ErrorType, ModelSpec, SupportPattern,
};
use crate::penalties::PenaltySystem;
use crate::simulate::{DataLaw, LawShape, MonteCarloPlan};

/// Deserializes JSON, reporting the path of the offending field on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CovselError::Parse { field, detail: e.into_inner().to_string() }
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CovselError::Parse { field: path.display().to_string(), detail: e.to_string() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PatternDoc {
    Named(String),
    Entries(Vec<[usize; 2]>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FactorClass,
    ExplicitSet,
}

/// One model entry. Factor classes use `q`, `pattern` (default `"full"`),
/// `error` and `bounds`; explicit sets use `matrices` and `nominal_order`.
/// The complexity scheme defaults to `dense_gauge` for full patterns,
/// `raw_support` for sparse ones and `{"fixed": 1}` for explicit sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub kind: ModelKind,
    #[serde(default)]
    pub q: Option<usize>,
    #[serde(default)]
    pub pattern: Option<PatternDoc>,
    #[serde(default)]
    pub error: Option<ErrorType>,
    #[serde(default)]
    pub bounds: Option<ClassBounds>,
    #[serde(default)]
    pub matrices: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub nominal_order: Option<usize>,
    #[serde(default)]
    pub complexity_scheme: Option<ComplexityScheme>,
}

fn required<T: Clone>(v: &Option<T>, k: usize, name: &str) -> Result<T> {
    v.clone().ok_or_else(|| CovselError::Parse { field: format!("models[{k}].{name}"), detail: "missing field".into() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyDoc {
    pub p: usize,
    pub models: Vec<ModelDoc>,
    #[serde(default)]
    pub penalty: Option<PenaltySystem>,
    /// Seed for Jacobian-rank complexities.
    #[serde(default)]
    pub complexity_seed: u64,
}

impl FamilyDoc {
    pub fn build(&self) -> Result<CandidateFamily> {
        if self.models.is_empty() {
            return Err(CovselError::InvalidSpec("family must contain at least one model".into()));
        }
        let mut models = Vec::with_capacity(self.models.len());
        let mut schemes = Vec::with_capacity(self.models.len());
        for (k, doc) in self.models.iter().enumerate() {
            let (spec, scheme) = match doc.kind {
                ModelKind::FactorClass => {
                    let q = required(&doc.q, k, "q")?;
                    let error = required(&doc.error, k, "error")?;
                    let bounds = required(&doc.bounds, k, "bounds")?;
                    let pattern = match doc.pattern.clone().unwrap_or(PatternDoc::Named("full".into())) {
                        PatternDoc::Named(s) if s == "full" => SupportPattern::full(self.p, q),
                        PatternDoc::Named(s) => {
                            return Err(CovselError::Parse {
                                field: format!("models[{k}].pattern"),
                                detail: format!("unknown pattern name {s:?}; use \"full\" or a list of [row, col]"),
                            })
                        }
                        PatternDoc::Entries(e) => SupportPattern::new(self.p, q, e.iter().map(|[r, c]| (*r, *c)).collect()),
                    };
                    let default = if pattern.is_full() { ComplexityScheme::DenseGauge } else { ComplexityScheme::RawSupport };
                    (ModelSpec::factor(pattern, error, bounds), doc.complexity_scheme.unwrap_or(default))
                }
                ModelKind::ExplicitSet => {
                    let ms = required(&doc.matrices, k, "matrices")?
                        .iter()
                        .enumerate()
                        .map(|(i, rows)| {
                            matrix_from_rows(rows).map_err(|e| CovselError::Parse {
                                field: format!("models[{k}].matrices[{i}]"),
                                detail: e.to_string(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let order = doc.nominal_order.unwrap_or(0);
                    (ModelSpec::explicit(ms, order), doc.complexity_scheme.unwrap_or(ComplexityScheme::Fixed(1.0)))
                }
            };
            if spec.p() != self.p {
                return Err(CovselError::InvalidSpec(format!("model {k}: dimension {} differs from p = {}", spec.p(), self.p)));
            }
            models.push(spec);
            schemes.push(scheme);
        }
        let unchecked = CandidateFamily::new(models.clone(), vec![1.0; models.len()]);
        let report = validate_family(&unchecked);
        if !report.is_valid() {
            return Err(CovselError::InvalidSpec(report.to_string()));
        }
        let complexities = models
            .iter()
            .zip(&schemes)
            .enumerate()
            .map(|(k, (m, s))| crate::model_space::complexity(m, *s, crate::rng::derive_seed(self.complexity_seed, &[k as u64])))
            .collect::<Result<Vec<_>>>()?;
        let family = CandidateFamily::new(models, complexities);
        let report = validate_family(&family);
        if !report.is_valid() {
            return Err(CovselError::InvalidSpec(report.to_string()));
        }
        Ok(family)
    }
}

pub fn family_from_json(text: &str) -> Result<(CandidateFamily, Option<PenaltySystem>)> {
    let doc: FamilyDoc = parse_json(text)?;
    Ok((doc.build()?, doc.penalty))
}

pub fn load_family(path: &Path) -> Result<(CandidateFamily, Option<PenaltySystem>)> {
    family_from_json(&read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetDoc {
    pub cov: Vec<Vec<f64>>,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
}

impl TargetDoc {
    pub fn build(&self) -> Result<PopulationTarget> {
        let cov = matrix_from_rows(&self.cov).map_err(|e| CovselError::Parse { field: "cov".into(), detail: e.to_string() })?;
        let mean = match &self.mean {
            Some(m) => DVector::from_vec(m.clone()),
            None => DVector::zeros(cov.nrows()),
        };
        PopulationTarget::new(mean, cov).map_err(|e| match e {
            CovselError::NotPositiveDefinite(_) => CovselError::InvalidArgument("cov must be positive definite".into()),
            e => e,
        })
    }
}

pub fn load_target(path: &Path) -> Result<PopulationTarget> {
    parse_json::<TargetDoc>(&read(path)?)?.build()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawDoc {
    #[serde(flatten)]
    pub shape: LawShape,
    pub cov: Vec<Vec<f64>>,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
}

impl LawDoc {
    pub fn build(&self) -> Result<DataLaw> {
        let t = TargetDoc { cov: self.cov.clone(), mean: self.mean.clone() }.build()?;
        let law = DataLaw { shape: self.shape.clone(), mean: t.mean, cov: t.cov };
        law.validate()?;
        Ok(law)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemDoc {
    Name(String),
    System(PenaltySystem),
}

impl SystemDoc {
    pub fn build(&self) -> Result<PenaltySystem> {
        match self {
            SystemDoc::Name(s) => PenaltySystem::from_name(s)
                .ok_or_else(|| CovselError::Parse { field: "systems".into(), detail: format!("unknown penalty {s:?}") }),
            SystemDoc::System(s) => Ok(s.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDoc {
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub law: LawDoc,
    pub family: FamilyDoc,
    pub systems: Vec<SystemDoc>,
}

impl PlanDoc {
    pub fn build(&self) -> Result<MonteCarloPlan> {
        let plan = MonteCarloPlan {
            n_grid: self.n_grid.clone(),
            replications: self.replications,
            seed: self.seed,
            law: self.law.build()?,
            family: self.family.build()?,
            systems: self.systems.iter().map(SystemDoc::build).collect::<Result<_>>()?,
        };
        plan.validate()?;
        Ok(plan)
    }
}

pub fn plan_from_json(text: &str) -> Result<MonteCarloPlan> {
    parse_json::<PlanDoc>(text)?.build()
}

pub fn load_plan(path: &Path) -> Result<MonteCarloPlan> {
    plan_from_json(&read(path)?)
}

/// Rows are observations; every row must have the same number of numeric fields.
pub fn read_csv_data(path: &Path, header: bool) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CovselError::Parse { field: path.display().to_string(), detail: e.to_string() })?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CovselError::Parse { field: format!("row {}", i + 1), detail: e.to_string() })?;
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(CovselError::Parse { field: format!("row {}", i + 1), detail: "inconsistent number of columns".into() });
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| CovselError::Parse {
                field: format!("row {}, column {}", i + 1, j + 1),
                detail: format!("{field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(CovselError::Parse { field: format!("row {}, column {}", i + 1, j + 1), detail: "value is not finite".into() });
            }
            values.push(v);
        }
        rows += 1;
    }
    let p = width.unwrap_or(0);
    if rows == 0 || p == 0 {
        return Err(CovselError::Parse { field: path.display().to_string(), detail: "no data rows".into() });
    }
    Ok(DMatrix::from_row_slice(rows, p, &values))
}

pub fn save_moments(path: &Path, moments: &SampleMoments) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(moments).expect("moments serialize"))?;
    Ok(())
}

pub fn load_moments(path: &Path) -> Result<SampleMoments> {
    let m: SampleMoments = parse_json(&read(path)?)?;
    SampleMoments::new(m.n, m.mean, m.cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FAMILY: &str = r#"{
        "p": 3,
        "models": [
            {"kind": "factor_class", "q": 0, "error": "diag", "bounds": {"psi_min": 0.05, "psi_max": 10, "M": 10}},
            {"kind": "factor_class", "q": 1, "pattern": "full", "error": "diag",
             "bounds": {"psi_min": 0.05, "psi_max": 10, "M": 10}},
            {"kind": "factor_class", "q": 2, "pattern": [[0,0],[1,0],[2,1]], "error": "sph",
             "bounds": {"psi_min": 0.05, "psi_max": 10, "M": 10}, "complexity_scheme": "jacobian_rank"},
            {"kind": "explicit_set", "matrices": [[[1,0,0],[0,1,0],[0,0,1]]], "complexity_scheme": {"fixed": 2.5}}
        ],
        "penalty": {"kind": "hq"}
    }"#;

    #[test]
    fn family_document_round_trip() {
        let (fam, pen) = family_from_json(FAMILY).unwrap();
        assert_eq!(fam.len(), 4);
        assert_eq!(fam.complexities[0], 3.0);
        assert_eq!(fam.complexities[1], 6.0);
        assert_eq!(fam.complexities[2], 4.0);
        assert_eq!(fam.complexities[3], 2.5);
        assert_eq!(pen, Some(PenaltySystem::Hq));
        assert_eq!(fam.orders(), vec![0, 1, 2, 0]);
    }

    #[test]
    fn zero_psi_min_is_reported() {
        let bad = FAMILY.replacen("\"psi_min\": 0.05", "\"psi_min\": 0", 1);
        let err = family_from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("psi_min must be strictly positive"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn parse_errors_name_the_field() {
        let bad = FAMILY.replacen("\"psi_max\": 10", "\"psi_max\": \"ten\"", 1);
        match family_from_json(&bad).unwrap_err() {
            CovselError::Parse { field, .. } => assert!(field.contains("psi_max"), "{field}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn plan_document() {
        let plan = format!(
            r#"{{"n_grid": [50, 100], "replications": 2, "seed": 1,
                "law": {{"kind": "student_t", "dof": 8, "cov": [[1,0,0],[0,1,0],[0,0,1]]}},
                "family": {FAMILY}, "systems": ["bic", {{"kind": "aic"}}]}}"#
        )
        .replace("\"penalty\": {\"kind\": \"hq\"}", "\"complexity_seed\": 0");
        let p = plan_from_json(&plan).unwrap();
        assert_eq!(p.systems, vec![PenaltySystem::Bic, PenaltySystem::Aic]);
        assert_eq!(p.law.shape, LawShape::StudentT { dof: 8.0 });
    }

    #[test]
    fn csv_with_and_without_header() {
        let dir = std::env::temp_dir().join(format!("covsel-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let with = dir.join("h.csv");
        fs::write(&with, "a,b\n1,2\n3,4\n").unwrap();
        assert_eq!(read_csv_data(&with, true).unwrap(), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(read_csv_data(&with, false).is_err());
        let ragged = dir.join("r.csv");
        fs::write(&ragged, "1,2\n3\n").unwrap();
        assert!(read_csv_data(&ragged, false).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
