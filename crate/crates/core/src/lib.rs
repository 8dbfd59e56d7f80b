//! Consistent covariance-model selection with the profiled Gaussian
//! quasi-likelihood and a penalty.

pub mod error;
pub mod fit;
pub mod gauss_criterion;
pub mod io;
pub mod linalg;
pub mod model_space;
pub mod penalties;
pub mod population;
pub mod rng;
pub mod select;
pub mod simulate;

pub use error::{CovselError, Result};
pub use fit::{fit_class, FitOptions, FitResult, FitStatus};
pub use gauss_criterion::{compute_moments, PopulationTarget, SampleMoments};
pub use model_space::{CandidateFamily, ClassBounds, ComplexityScheme, ErrorType, ModelSpec, SupportPattern};
pub use penalties::PenaltySystem;
pub use population::{pseudo_true_summary, PopulationSummary};
pub use select::{select_model, SelectionReport};
