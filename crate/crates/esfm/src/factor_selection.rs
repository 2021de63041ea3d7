//! Information-criterion choice of the number of latent factors.
//!
//! `IC(r) = log V(r) + r q(N,T)` where `V(r)` is the minimized mean squared
//! residual with `r` factors and `q` shrinks slowly enough that genuine
//! factors survive the penalty while noise components do not.

use crate::es_factor_stage::{
    extract_factors, fit_es_factor_model_from, pseudo_response_matrix, FitOptions,
};
use crate::panel_core::{EsfmError, FactorBundle, PanelData, TailLevel};
use crate::quantile_stage::QuantileFit;
use nalgebra::DMatrix;

/// Floor applied to `V(r)` before taking its logarithm, so exact fits keep
/// the criterion finite without disturbing the ordering.
const VARIANCE_FLOOR: f64 = 1e-300;

/// Selection table over candidate factor counts.
#[derive(Debug, Clone)]
pub struct ICSelection {
    /// Candidates `0..=r_max` in order.
    pub candidates: Vec<usize>,
    /// Minimized mean squared residual per candidate; non-increasing.
    pub v: Vec<f64>,
    /// Criterion value per candidate.
    pub ic: Vec<f64>,
    /// Argmin of `ic`, ties resolved toward the smaller candidate.
    pub r_hat: usize,
}

/// Penalty `q(N,T) = log(NT/(N+T)) (N+T)/(NT)`.
pub fn penalty(n: usize, t_len: usize) -> f64 {
    let n = n as f64;
    let t = t_len as f64;
    let ratio = (n + t) / (n * t);
    (1.0 / ratio).ln() * ratio
}

/// Minimized objective with `r` factors on the Stage-1 pseudo-response.
pub fn residual_variance(
    panel: &PanelData,
    qfit: &QuantileFit,
    tau: TailLevel,
    r: usize,
    opts: &FitOptions,
) -> Result<f64, EsfmError> {
    let zstar = pseudo_response_matrix(panel, &qfit.a, tau);
    let fit = fit_es_factor_model_from(panel, &zstar, r, opts, None)?;
    Ok(*fit.objective_path.last().unwrap())
}

/// Runs the candidate fits for `r = 0..=r_max` and picks the criterion
/// minimizer. Each candidate is warm-started from the previous fit's factors
/// padded with the leading principal component of its residuals, which keeps
/// `V` non-increasing by construction.
pub fn select_num_factors(
    panel: &PanelData,
    qfit: &QuantileFit,
    tau: TailLevel,
    r_max: usize,
    opts: &FitOptions,
) -> Result<ICSelection, EsfmError> {
    let zstar = pseudo_response_matrix(panel, &qfit.a, tau);
    select_num_factors_from(panel, &zstar, r_max, opts)
}

/// Selection on a prebuilt response matrix.
pub fn select_num_factors_from(
    panel: &PanelData,
    zstar: &DMatrix<f64>,
    r_max: usize,
    opts: &FitOptions,
) -> Result<ICSelection, EsfmError> {
    if r_max + 1 > panel.n.min(panel.t_len) {
        return Err(EsfmError::BadConfig(format!(
            "r_max = {r_max} must be below min(N,T) = {}",
            panel.n.min(panel.t_len)
        )));
    }
    let q = penalty(panel.n, panel.t_len);
    let mut candidates = Vec::with_capacity(r_max + 1);
    let mut v = Vec::with_capacity(r_max + 1);
    let mut ic = Vec::with_capacity(r_max + 1);

    let mut previous: Option<(FactorBundle, DMatrix<f64>)> = None;
    for r in 0..=r_max {
        let init = match (r, &previous) {
            (0, _) | (_, None) => None,
            (_, Some((bundle, residuals))) => {
                Some(pad_with_residual_component(bundle, residuals)?)
            }
        };
        let fit = fit_es_factor_model_from(panel, zstar, r, opts, init)?;
        let variance = *fit.objective_path.last().unwrap();
        candidates.push(r);
        v.push(variance);
        ic.push(variance.max(VARIANCE_FLOOR).ln() + r as f64 * q);
        previous = Some((fit.factors, fit.residuals));
    }

    let mut r_hat = 0;
    for r in 1..=r_max {
        if ic[r] < ic[r_hat] {
            r_hat = r;
        }
    }
    Ok(ICSelection { candidates, v, ic, r_hat })
}

/// Appends the top principal component of `residuals` to `bundle.f`,
/// re-orthonormalizes, and rescales so the warm start satisfies `F'F/T = I`.
fn pad_with_residual_component(
    bundle: &FactorBundle,
    residuals: &DMatrix<f64>,
) -> Result<FactorBundle, EsfmError> {
    let t_len = residuals.ncols();
    let extra = extract_factors(residuals, 1)?;
    let mut stacked = DMatrix::zeros(t_len, bundle.r + 1);
    for k in 0..bundle.r {
        stacked.set_column(k, &bundle.f.column(k));
    }
    stacked.set_column(bundle.r, &extra.f.column(0));
    let q = stacked.qr().q();
    let mut f = q * (t_len as f64).sqrt();
    for k in 0..f.ncols() {
        let sum: f64 = f.column(k).iter().sum();
        if sum < 0.0 {
            for t in 0..t_len {
                f[(t, k)] = -f[(t, k)];
            }
        }
    }
    let lambda = DMatrix::zeros(residuals.nrows(), bundle.r + 1);
    Ok(FactorBundle { r: bundle.r + 1, f, lambda })
}
