//! Stage 2: alternating least squares for the interactive-fixed-effects ES
//! regression `Z* = X beta + Lambda F' + e`.
//!
//! Each iteration solves the per-unit projected regression for `beta` given
//! `F`, then re-extracts `F` by principal components of the residual matrix
//! `W = Z* - X B`. Both half-steps are exact conditional minimizers, so the
//! objective path is non-increasing.

use crate::panel_core::{
    annihilate, check_factor_normalization, ols, pseudo_response, EsfmError, FactorBundle,
    PanelData, TailLevel,
};
use crate::quantile_stage::QuantileFit;
use nalgebra::{DMatrix, DVector};

/// Controls for the alternating fit.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative objective-change tolerance.
    pub tolerance: f64,
    /// Ridge jitter factor for near-singular `X' M_F X`, scaled by
    /// `tr(X' M_F X)/(p+1)` and added once.
    pub ridge_jitter: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iterations: 1000, tolerance: 1e-8, ridge_jitter: 1e-10 }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), EsfmError> {
        if !(self.tolerance > 0.0) {
            return Err(EsfmError::BadConfig("fit tolerance must be positive".into()));
        }
        if self.ridge_jitter < 0.0 {
            return Err(EsfmError::BadConfig("ridge jitter must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Stage-2 estimate.
#[derive(Debug, Clone)]
pub struct ESFactorFit {
    /// `N x (p+1)` coefficient matrix.
    pub b: DMatrix<f64>,
    pub factors: FactorBundle,
    /// `N x T` residuals `Z* - X beta - Lambda F'`.
    pub residuals: DMatrix<f64>,
    /// Objective value after each completed iteration; non-increasing.
    pub objective_path: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when any unit's normal equations needed the ridge jitter.
    pub jitter_applied: bool,
}

/// Builds the `N x T` pseudo-response matrix `Z*` from Stage-1 coefficients.
pub fn pseudo_response_matrix(panel: &PanelData, a: &DMatrix<f64>, tau: TailLevel) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(panel.n, panel.t_len);
    for i in 0..panel.n {
        let x_i = &panel.x[i];
        for t in 0..panel.t_len {
            let mut q = 0.0;
            for j in 0..x_i.ncols() {
                q += x_i[(t, j)] * a[(i, j)];
            }
            let (_, z_star) = pseudo_response(panel.y[(i, t)], q, tau);
            z[(i, t)] = z_star;
        }
    }
    z
}

/// Least-squares coefficient of `M_F z*_i` on `M_F X_i`. Returns the solution
/// and whether the ridge jitter was needed.
pub fn update_beta(
    zstar_i: &DVector<f64>,
    x_i: &DMatrix<f64>,
    f: &DMatrix<f64>,
    ridge_jitter: f64,
) -> Result<(DVector<f64>, bool), EsfmError> {
    update_beta_indexed(zstar_i, x_i, f, ridge_jitter, 0)
}

fn update_beta_indexed(
    zstar_i: &DVector<f64>,
    x_i: &DMatrix<f64>,
    f: &DMatrix<f64>,
    ridge_jitter: f64,
    unit: usize,
) -> Result<(DVector<f64>, bool), EsfmError> {
    let xt = annihilate(f, x_i)?;
    let zt = annihilate(f, &DMatrix::from_column_slice(zstar_i.len(), 1, zstar_i.as_slice()))?;
    let p1 = x_i.ncols();
    let gram = xt.transpose() * &xt;
    let rhs = xt.transpose() * zt.column(0);
    if let Some(chol) = gram.clone().cholesky() {
        return Ok((chol.solve(&rhs), false));
    }
    let jitter = ridge_jitter * gram.trace() / p1 as f64;
    let mut jittered = gram;
    for j in 0..p1 {
        jittered[(j, j)] += jitter;
    }
    match jittered.cholesky() {
        Some(chol) => Ok((chol.solve(&rhs), true)),
        None => Err(EsfmError::SingularUnit { unit }),
    }
}

/// Principal-component factor extraction from the residual matrix `W`.
///
/// `F` is `sqrt(T)` times the top-`r` eigenvectors of `W'W/(TN)` (realized on
/// the smaller Gram side), columns ordered by descending eigenvalue, sign
/// convention applied; `Lambda = W F / T`.
pub fn extract_factors(w: &DMatrix<f64>, r: usize) -> Result<FactorBundle, EsfmError> {
    let n = w.nrows();
    let t_len = w.ncols();
    if r > n.min(t_len) {
        return Err(EsfmError::BadShape(format!(
            "r = {r} exceeds min(N,T) = {}",
            n.min(t_len)
        )));
    }
    if r == 0 {
        return Ok(FactorBundle::empty(n, t_len));
    }

    let mut f = if n < t_len {
        match factors_from_unit_side(w, r) {
            Some(f) => f,
            // Trailing singular values vanished: the time-side Gram still
            // yields a full orthonormal set.
            None => factors_from_time_side(w, r),
        }
    } else {
        factors_from_time_side(w, r)
    };

    apply_sign_convention(&mut f);
    let lambda = w * &f / t_len as f64;
    Ok(FactorBundle { r, f, lambda })
}

/// Eigen pairs of a symmetric Gram matrix, ordered by descending eigenvalue
/// with index tie-breaking.
fn sorted_eigen(gram: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = gram.symmetric_eigen();
    let m = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(m, m);
    for (pos, &k) in order.iter().enumerate() {
        vectors.set_column(pos, &eig.eigenvectors.column(k));
    }
    (values, vectors)
}

/// `F = sqrt(T) V_r` from the `N x N` Gram `W W'/(NT)`; `None` when a needed
/// singular value is too small to divide by.
fn factors_from_unit_side(w: &DMatrix<f64>, r: usize) -> Option<DMatrix<f64>> {
    let n = w.nrows() as f64;
    let t_len = w.ncols() as f64;
    let gram = w * w.transpose() / (n * t_len);
    let (values, vectors) = sorted_eigen(gram);
    let scale_floor = 1e-14 * values[0].abs().max(1e-300);
    let mut f = DMatrix::zeros(w.ncols(), r);
    for k in 0..r {
        let sigma = values[k].max(0.0).sqrt();
        if sigma * sigma <= scale_floor {
            return None;
        }
        // F column = sqrt(T) v_k = W' u_k / (sqrt(N) sigma_k) since the
        // eigenvalue of the scaled Gram is sigma_k^2 = s_k^2/(NT).
        let col = w.transpose() * vectors.column(k) / (n.sqrt() * sigma);
        f.set_column(k, &col);
    }
    Some(f)
}

/// `F = sqrt(T)` times top-`r` eigenvectors of the `T x T` Gram `W'W/(TN)`.
fn factors_from_time_side(w: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let n = w.nrows() as f64;
    let t_len = w.ncols() as f64;
    let gram = w.transpose() * w / (n * t_len);
    let (_, vectors) = sorted_eigen(gram);
    let mut f = DMatrix::zeros(w.ncols(), r);
    for k in 0..r {
        f.set_column(k, &(vectors.column(k) * t_len.sqrt()));
    }
    f
}

/// Nonnegative column sums; a zero sum is broken by the first nonzero entry.
fn apply_sign_convention(f: &mut DMatrix<f64>) {
    for k in 0..f.ncols() {
        let sum: f64 = f.column(k).iter().sum();
        let flip = if sum != 0.0 {
            sum < 0.0
        } else {
            f.column(k).iter().find(|v| **v != 0.0).map(|v| *v < 0.0).unwrap_or(false)
        };
        if flip {
            for t in 0..f.nrows() {
                f[(t, k)] = -f[(t, k)];
            }
        }
    }
}

/// Initial factors: principal components of the residuals from per-unit OLS
/// of `Z*_i` on `X_i` (no factors).
pub fn init_factors(
    panel: &PanelData,
    zstar: &DMatrix<f64>,
    r: usize,
) -> Result<FactorBundle, EsfmError> {
    let w = ols_residual_matrix(panel, zstar)?;
    extract_factors(&w, r)
}

fn ols_residual_matrix(
    panel: &PanelData,
    zstar: &DMatrix<f64>,
) -> Result<DMatrix<f64>, EsfmError> {
    let mut w = DMatrix::zeros(panel.n, panel.t_len);
    for i in 0..panel.n {
        let z_i = DVector::from_iterator(panel.t_len, (0..panel.t_len).map(|t| zstar[(i, t)]));
        let b = ols(&panel.x[i], &z_i, "initialization design")?;
        let fitted = &panel.x[i] * b;
        for t in 0..panel.t_len {
            w[(i, t)] = zstar[(i, t)] - fitted[t];
        }
    }
    Ok(w)
}

/// Mean squared residual `(1/NT) sum (z*_it - x_it' beta_i - lambda_i' f_t)^2`.
pub fn objective(
    panel: &PanelData,
    zstar: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bundle: &FactorBundle,
) -> f64 {
    let common = &bundle.lambda * bundle.f.transpose();
    let mut total = 0.0;
    for i in 0..panel.n {
        let x_i = &panel.x[i];
        for t in 0..panel.t_len {
            let mut fitted = 0.0;
            for j in 0..x_i.ncols() {
                fitted += x_i[(t, j)] * b[(i, j)];
            }
            let resid = zstar[(i, t)] - fitted - common[(i, t)];
            total += resid * resid;
        }
    }
    total / (panel.n * panel.t_len) as f64
}

/// Two-stage entry point: builds `Z*` from the Stage-1 fit and runs the
/// alternating estimation with the default PCA initialization.
pub fn fit_es_factor_model(
    panel: &PanelData,
    qfit: &QuantileFit,
    tau: TailLevel,
    r: usize,
    opts: &FitOptions,
) -> Result<ESFactorFit, EsfmError> {
    let zstar = pseudo_response_matrix(panel, &qfit.a, tau);
    fit_es_factor_model_from(panel, &zstar, r, opts, None)
}

/// Alternating estimation on a prebuilt `Z*`, optionally warm-started from
/// `init` (defaults to `init_factors`).
pub fn fit_es_factor_model_from(
    panel: &PanelData,
    zstar: &DMatrix<f64>,
    r: usize,
    opts: &FitOptions,
    init: Option<FactorBundle>,
) -> Result<ESFactorFit, EsfmError> {
    opts.validate()?;
    if r > panel.n.min(panel.t_len) {
        return Err(EsfmError::BadShape(format!(
            "r = {r} exceeds min(N,T) = {}",
            panel.n.min(panel.t_len)
        )));
    }
    if zstar.nrows() != panel.n || zstar.ncols() != panel.t_len {
        return Err(EsfmError::BadShape(format!(
            "Z* is {}x{}, expected {}x{}",
            zstar.nrows(),
            zstar.ncols(),
            panel.n,
            panel.t_len
        )));
    }
    let p1 = panel.p + 1;
    let mut jitter_applied = false;

    if r == 0 {
        let mut b = DMatrix::zeros(panel.n, p1);
        for i in 0..panel.n {
            let z_i = DVector::from_iterator(panel.t_len, (0..panel.t_len).map(|t| zstar[(i, t)]));
            let (coef, used) =
                update_beta_indexed(&z_i, &panel.x[i], &DMatrix::zeros(panel.t_len, 0), opts.ridge_jitter, i)?;
            jitter_applied |= used;
            for j in 0..p1 {
                b[(i, j)] = coef[j];
            }
        }
        let bundle = FactorBundle::empty(panel.n, panel.t_len);
        let obj = objective(panel, zstar, &b, &bundle);
        let residuals = residual_matrix(panel, zstar, &b, &bundle);
        return Ok(ESFactorFit {
            b,
            factors: bundle,
            residuals,
            objective_path: vec![obj],
            iterations: 1,
            converged: true,
            jitter_applied,
        });
    }

    let mut bundle = match init {
        Some(bundle) => {
            check_factor_normalization(&bundle.f)?;
            bundle
        }
        None => init_factors(panel, zstar, r)?,
    };
    let mut b = DMatrix::zeros(panel.n, p1);
    let mut objective_path = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iterations {
        iterations += 1;
        for i in 0..panel.n {
            let z_i = DVector::from_iterator(panel.t_len, (0..panel.t_len).map(|t| zstar[(i, t)]));
            let (coef, used) =
                update_beta_indexed(&z_i, &panel.x[i], &bundle.f, opts.ridge_jitter, i)?;
            jitter_applied |= used;
            for j in 0..p1 {
                b[(i, j)] = coef[j];
            }
        }
        let mut w = zstar.clone();
        for i in 0..panel.n {
            let x_i = &panel.x[i];
            for t in 0..panel.t_len {
                let mut fitted = 0.0;
                for j in 0..p1 {
                    fitted += x_i[(t, j)] * b[(i, j)];
                }
                w[(i, t)] -= fitted;
            }
        }
        bundle = extract_factors(&w, r)?;
        let obj = objective(panel, zstar, &b, &bundle);
        let rel_change = objective_path
            .last()
            .map(|prev: &f64| (prev - obj) / prev.abs().max(1e-300));
        objective_path.push(obj);
        if let Some(rel) = rel_change {
            if rel < opts.tolerance {
                converged = true;
                break;
            }
        }
    }

    let residuals = residual_matrix(panel, zstar, &b, &bundle);
    Ok(ESFactorFit {
        b,
        factors: bundle,
        residuals,
        objective_path,
        iterations,
        converged,
        jitter_applied,
    })
}

fn residual_matrix(
    panel: &PanelData,
    zstar: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bundle: &FactorBundle,
) -> DMatrix<f64> {
    let common = &bundle.lambda * bundle.f.transpose();
    let mut resid = zstar.clone();
    for i in 0..panel.n {
        let x_i = &panel.x[i];
        for t in 0..panel.t_len {
            let mut fitted = 0.0;
            for j in 0..x_i.ncols() {
                fitted += x_i[(t, j)] * b[(i, j)];
            }
            resid[(i, t)] -= fitted + common[(i, t)];
        }
    }
    resid
}

/// Fitted ES surface `X beta + Lambda F'`.
pub fn predict_es(fit: &ESFactorFit, panel: &PanelData) -> DMatrix<f64> {
    let common = &fit.factors.lambda * fit.factors.f.transpose();
    let mut out = DMatrix::zeros(panel.n, panel.t_len);
    for i in 0..panel.n {
        let x_i = &panel.x[i];
        for t in 0..panel.t_len {
            let mut fitted = 0.0;
            for j in 0..x_i.ncols() {
                fitted += x_i[(t, j)] * fit.b[(i, j)];
            }
            out[(i, t)] = fitted + common[(i, t)];
        }
    }
    out
}
