//! Multiway cluster-robust double/debiased machine learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`] holds multiway-clustered datasets and their CSV ingestion.
//! - [`crossfit`] builds the `K^ℓ` fold plan over cluster labels.
//! - [`nuisance`] fits ridge / lasso / elastic-net regressions by coordinate descent.
//! - [`score`] defines linear orthogonal scores and the partially linear IV instance.
//! - [`estimator`] solves for the target parameter and computes cluster-robust variances.
//! - [`simulate`] generates two-way clustered designs and runs Monte Carlo studies.
//! - [`cli`] wires everything to the `mwdml` command-line tool.

pub mod cli;
pub mod crossfit;
pub mod data;
pub mod error;
pub mod estimator;
pub mod nuisance;
pub mod rng;
pub mod score;
pub mod simulate;

pub use crossfit::FoldPlan;
pub use data::{ColumnMapping, MultiwayDataset, Observation, ValidationReport};
pub use error::{Error, Result};
pub use estimator::{run_dml, Aggregation, DmlConfig, EstimateReport, Robustness};
pub use nuisance::{fit_elastic_net, predict, select_lambda_cv, Lambda, LinearFit, PenaltyConfig};
pub use score::{NuisanceLearner, PlivNuisance, ScoreComponents};
pub use simulate::{generate_dgp, monte_carlo, DgpParams, McResult};
