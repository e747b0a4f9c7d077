//! Panel econometrics for county-by-year data.
//!
//! The crate is organised around a balanced [`PanelDataset`] and the estimators that
//! consume it:
//!
//! - [`twfe`]: two-way fixed-effects OLS with multiway cluster-robust covariance.
//! - [`spatial`]: maximum-likelihood spatial lag, spatial error and SARAR models on
//!   two-way demeaned data, with direct/indirect impact decomposition.
//! - [`factors`]: heterogeneous-time-trends estimator with smooth latent factors.
//! - [`diagnostics`]: cross-sectional dependence tests and model comparison.
//! - [`typology`]: Ward hierarchical clustering with elbow, silhouette and gap criteria.
//! - [`synth`]: seeded data-generating processes used as estimator oracles.

pub mod diagnostics;
pub mod error;
pub mod factors;
pub mod inference;
pub mod linalg;
pub mod panel;
pub mod rng;
pub mod spatial;
pub mod synth;
pub mod twfe;
pub mod typology;
pub mod weights;

pub use error::{Error, Result};
pub use panel::{PanelColumn, PanelDataset, VariableTransform};
pub use weights::{AdjacencyGraph, SpatialWeights};
