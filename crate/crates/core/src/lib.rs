//! Nonstationary, anisotropic lattice kriging: sparse SAR precision
//! construction, field simulation, exact likelihood and kriging, change of
//! support, conditional simulation and the experiment drivers built on them.

pub mod config;
pub mod cosp;
pub mod error;
pub mod geometry;
pub mod gridstack;
pub mod lattice;
pub mod likelihood;
pub mod optimize;
pub mod pipeline;
pub mod rng;
pub mod sar;
pub mod sim;
pub mod sparse;
pub mod stations;
pub mod uq;

pub use config::{ModelVariant, RunConfig};
pub use cosp::{
    adjust_kappa, areal_average, areal_covariance, eta1_covariance, refine_kappa_point, ArealPartition,
    CospNoise, KappaAdjustment, RefineConfig, RefineResult, WeightMask,
};
pub use error::{Error, Result};
pub use geometry::{Bounds, PixelGrid, Point};
pub use gridstack::GridStack;
pub use lattice::{evaluate_basis, wendland, BasisMatrix, BasisSpec, LatticeGrid};
pub use likelihood::{
    fit_stationary_mle, krige, log_likelihood, mle_small_grid_oracle, CandidateGrid, CovParams,
    FittedModel, KrigingResult, MleConfig, ObservationSet, SpatialData, Targets,
};
pub use sar::{build_sar, dispersion_matrix, precision, ParamFields, Precision, SarMatrix};
pub use sim::{
    generate_training_set, sample_param_fields, simulate_coefficients, simulate_fields,
    standardize_ensemble, FieldEnsemble, PriorConfig,
};
pub use uq::{
    compute_metrics, conditional_simulate, kfold_assign, summarize_uncertainty, ConditionalEnsemble,
    FoldAssignment, UQMetrics,
};

#[cfg(test)]
pub(crate) mod testutil;
