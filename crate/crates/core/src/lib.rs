//! Supervised component generalized linear regression for grouped data.
//!
//! A multivariate response block `Y` is modelled through a few orthogonal
//! components `f = Xu` built from a large, redundant regressor block `X`,
//! plus a small block of additional covariates `T`. Components maximize a
//! trade-off between structural relevance (closeness of `f` to bundles of
//! correlated columns of `X`) and goodness of fit of the Fisher-scoring
//! working responses. [`mixed`] inserts that maximization into a Schall
//! loop with a random group intercept per response, solved through
//! Henderson's mixed-model equations.
//!
//! Module map:
//! - [`data`]: CSV ingestion, standardization, group design.
//! - [`glm`]: families, links, working quantities, deviance.
//! - [`criterion`]: φ, ψ and the combined criterion with gradients.
//! - [`component`]: constrained maximization on the A-sphere.
//! - [`fixed`]: fixed-effects component regression.
//! - [`henderson`]: mixed-model equations and the variance update.
//! - [`mixed`]: mixed component regression and prediction.
//! - [`cv`]: grouped cross-validation over (H, s, l).
//! - [`ridge`]: ridge-penalized mixed baseline and method comparison.
//! - [`simulate`]: grouped data with known bundle structure.
//! - [`model_io`]: the JSON model document.

pub mod component;
pub mod criterion;
pub mod cv;
pub mod data;
pub mod error;
pub mod fixed;
pub mod glm;
pub mod henderson;
pub mod linalg;
pub mod mixed;
pub mod model_io;
pub mod ridge;
pub mod simulate;

pub use component::{
    maximize_component, nullspace_basis, ComponentSolution, OptimizerDiagnostics, OptimizerSettings, OrthoConstraints,
};
pub use criterion::{
    combined_criterion, combined_gradient, goodness_of_fit, relevance_gradient, structural_relevance, CriterionParams,
    FitContext, Locality, Metric,
};
pub use cv::{cross_validate, group_folds, CvConfig, CvGrid, CvResult, CvRow, TuningPoint};
pub use data::{load_csv, load_features, write_dataset, Dataset, Features, GroupDesign, Schema, Standardization};
pub use error::{Error, Result};
pub use fixed::{fit_scglr, ComponentDiagnostics, ComponentModel, FitSettings, TraceRow};
pub use glm::{working_quantities, Family, FamilySpec, WorkingQuantities};
pub use henderson::{henderson_solve, update_variance, HendersonSolution, MixedState, VarianceUpdate};
pub use mixed::{fit_mixed_scglr, predict_mixed, MixedComponentModel, MixedSettings, PredictionMode};
pub use model_io::{FittedModel, ModelDocument, ModelKind, MODEL_VERSION};
pub use ridge::{
    compare, default_lambda_grid, fit_ridge_mixed, select_lambda, write_comparison, CompareConfig, ComparisonRow,
    RidgeMixedModel,
};
pub use simulate::{gen_grouped_data, Bundle, GroundTruth, SimConfig};
