//! Nested hidden Markov models for multilevel longitudinal data.
//!
//! Every cluster carries a hidden Markov chain and so does every unit inside
//! it; both latent states enter the linear predictor of the unit's response.
//! The full likelihood couples all units of a cluster, so the model is fitted
//! by maximizing the pairwise likelihood over all within-cluster pairs with
//! an EM algorithm. Standard errors use the sandwich estimator and the
//! numbers of latent states are chosen by CLIC.

pub mod chain;
pub mod cli;
pub mod config;
pub mod em;
pub mod error;
pub mod forward;
pub mod inference;
pub mod io;
pub mod model;
pub mod regression;
pub mod simulate;

pub use chain::{build_tridiagonal, compose_augmented, pair_emission_vector, AugmentedChain};
pub use em::{e_step, fit, pairwise_loglik, run_em, EmConfig, FitResult};
pub use error::{Error, Result};
pub use forward::{collapse_posteriors, forward_loglik, posteriors, PairPosterior};
pub use inference::{clic, cluster_scores, sandwich, select_grid, GridReport, InferenceReport};
pub use model::{
    flatten_parameters, unflatten_parameters, validate_dataset, ClusterData, LagHandling, MeasurementFamily,
    ModelSpec, PanelDataset, ParameterSet, TransitionConstraint, UnitData,
};
pub use simulate::{simulate, SimDesign};
