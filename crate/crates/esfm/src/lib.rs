//! Two-stage expected shortfall factor model (ESFM) for panel data.
//!
//! Stage 1 fits a per-unit linear quantile regression at tail level `tau`.
//! Stage 2 transforms the response into the Neyman-orthogonal pseudo-response
//! `Z*` and estimates an interactive-fixed-effects regression
//! `Z*_it = X_it' beta_i + lambda_i' f_t + e_it` by alternating least squares
//! with the factors extracted through principal components.
//!
//! The crate also provides information-criterion selection of the factor
//! count, a plug-in asymptotic variance estimator for the slope coefficients,
//! scenario generators and a Monte Carlo driver for the simulation designs,
//! and an asset-pricing evaluation pipeline (rolling sorts, HAC alphas,
//! Fama-MacBeth regressions, generalized correlations).

pub mod asset_pricing;
pub mod dgp_sim;
pub mod es_factor_stage;
pub mod factor_selection;
pub mod inference;
pub mod panel_core;
pub mod quantile_stage;

pub use asset_pricing::{AlphaStat, FMResult, SortResult};
pub use dgp_sim::{
    Aggregates, MetricRecord, PanelTruth, RPolicy, ScenarioConfig, SimulationReport,
};
pub use es_factor_stage::{ESFactorFit, FitOptions};
pub use factor_selection::ICSelection;
pub use inference::{ScoreSet, StandardErrors, VarianceEstimate};
pub use panel_core::{EsfmError, FactorBundle, PanelData, TailLevel};
pub use quantile_stage::{QrOptions, QuantileFit};
