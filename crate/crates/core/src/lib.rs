//! Federated learning over connected modes: simplex learning of shared
//! endpoints, client subregion assignment, and the baselines and metrics used
//! to compare against it.

// NaN must fail parameter checks, so `!(x > 0.0)` is intended
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod partition;
pub mod report;
pub mod simplex;

pub use config::{parse_config, FederationConfig, Strategy};
pub use error::{FlocoError, Result};
pub use federation::{run_experiment, ExperimentOutcome, FederatedData};
pub use metrics::RoundMetrics;
pub use model::{ModelState, SimplexScope};
pub use simplex::{SimplexPoint, Subregion};
