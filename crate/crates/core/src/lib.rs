//! Conditional Karhunen-Loeve modeling of a log-normal diffusion coefficient,
//! forward uncertainty propagation through a steady-state diffusion equation,
//! and active-learning selection of new observation locations.
//!
//! The pipeline: a squared-exponential Gaussian-process prior for the
//! log-coefficient is conditioned on point observations, reduced to a
//! finite-dimensional expansion (either conditioning first and truncating, or
//! truncating first and conditioning the coefficients), pushed through the
//! diffusion solve by Monte Carlo or sparse-grid collocation, and refined by
//! acquisition policies that target either coefficient variance or solution
//! variance.

pub mod active;
pub mod conditioning;
pub mod error;
pub mod grid;
pub mod kernel_gp;
pub mod kl;
pub mod linalg;
pub mod pde;
pub mod rng;
pub mod uq;

pub use active::{AcquisitionResult, Campaign, CampaignConfig, CampaignStep, Method};
pub use conditioning::{ConditionalKLModel, ConditionedVariables, Provenance, Truncation};
pub use error::{Error, Result};
pub use grid::{Field, Point, StructuredGrid};
pub use kernel_gp::{FitResult, GpPosterior, KernelHyperparams, ObservationSet};
pub use kl::KLBasis;
pub use pde::{DiffusionProblem, SolutionField};
pub use uq::{FieldModel, MomentField, SparseGridRule};
