//! Plug-in asymptotic variance for the second-stage coefficients.
//!
//! The sampling error of `beta_i` couples across units through the estimated
//! factors. The variance assembly follows the asymptotic expansion: per-unit
//! curvature inverses `A_i`, cross-unit interaction blocks `H_ik` scaled by
//! loading similarities `a_ik`, the resolvent `G = (I - H/N)^{-1}`, and a
//! HAC long-run covariance of the factor-adjusted score vectors.

use crate::es_factor_stage::ESFactorFit;
use crate::panel_core::{annihilate, EsfmError, PanelData};
use nalgebra::DMatrix;

/// Factor-adjusted score vectors.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    /// `T x N(p+1)`: row `t` stacks `s_it` over units.
    pub stacked: DMatrix<f64>,
    /// `N x (p+1)`: `U_i = T^{-1/2} sum_t s_it`.
    pub u_hat: DMatrix<f64>,
    /// Mean squared magnitude of the unadjusted moments `x~_it e_it`;
    /// reference scale for deciding that adjusted scores cancelled exactly.
    pub raw_second_moment: f64,
}

/// Per-unit asymptotic variance estimates.
#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    /// `N` symmetric PSD `(p+1) x (p+1)` matrices.
    pub omega: Vec<DMatrix<f64>>,
    /// `sqrt(diag(Omega_i)/T)`.
    pub se: DMatrix<f64>,
    pub hac_lag: usize,
}

/// Standard errors with the derived t-statistics.
#[derive(Debug, Clone)]
pub struct StandardErrors {
    pub se: DMatrix<f64>,
    /// `beta / se`; NaN where the standard error is zero.
    pub t: DMatrix<f64>,
}

/// Bandwidth rule `floor(4 (T/100)^(2/9))`.
pub fn default_hac_lag(t_len: usize) -> usize {
    (4.0 * (t_len as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// Loading-similarity matrix `a_ik = lambda_i' (Lambda'Lambda/N)^{-1} lambda_k`,
/// zero when the fit has no factors.
fn loading_similarity(fit: &ESFactorFit, n: usize) -> Result<DMatrix<f64>, EsfmError> {
    if fit.factors.r == 0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let lambda = &fit.factors.lambda;
    let gram = lambda.transpose() * lambda / n as f64;
    match gram.clone().cholesky() {
        Some(chol) => {
            let solved = chol.solve(&lambda.transpose());
            Ok(lambda * solved)
        }
        None => {
            let svd = gram.svd(false, false);
            let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
            Err(EsfmError::SingularSystem { min_singular_value: min_sv })
        }
    }
}

/// Scores `s_it = x~_it e_it - (1/N) sum_k a_ik x~_kt e_kt` with `x~` the
/// factor-annihilated covariates and `e` the fit residuals.
pub fn score_contributions(fit: &ESFactorFit, panel: &PanelData) -> Result<ScoreSet, EsfmError> {
    let n = panel.n;
    let t_len = panel.t_len;
    let p1 = panel.p + 1;
    let a_sim = loading_similarity(fit, n)?;
    let adjust = {
        let mut m = DMatrix::identity(n, n);
        m -= &a_sim / n as f64;
        m
    };

    let mut x_tilde = Vec::with_capacity(n);
    for i in 0..n {
        x_tilde.push(annihilate(&fit.factors.f, &panel.x[i])?);
    }

    let mut stacked = DMatrix::zeros(t_len, n * p1);
    let mut m_t = DMatrix::zeros(n, p1);
    let mut raw_second_moment = 0.0;
    for t in 0..t_len {
        for i in 0..n {
            let e = fit.residuals[(i, t)];
            for j in 0..p1 {
                let m = x_tilde[i][(t, j)] * e;
                m_t[(i, j)] = m;
                raw_second_moment += m * m;
            }
        }
        let s_t = &adjust * &m_t;
        for i in 0..n {
            for j in 0..p1 {
                stacked[(t, i * p1 + j)] = s_t[(i, j)];
            }
        }
    }
    raw_second_moment /= (t_len * n * p1) as f64;

    let mut u_hat = DMatrix::zeros(n, p1);
    let scale = (t_len as f64).sqrt();
    for i in 0..n {
        for j in 0..p1 {
            let mut total = 0.0;
            for t in 0..t_len {
                total += stacked[(t, i * p1 + j)];
            }
            u_hat[(i, j)] = total / scale;
        }
    }
    Ok(ScoreSet { stacked, u_hat, raw_second_moment })
}

/// Bartlett HAC long-run covariance of the stacked scores:
/// `Gamma_0 + sum_l w_l (Gamma_l + Gamma_l')` with `w_l = 1 - l/(L+1)`.
fn hac_long_run(stacked: &DMatrix<f64>, lag: usize) -> DMatrix<f64> {
    let t_len = stacked.nrows();
    let dim = stacked.ncols();
    let mut sigma = DMatrix::zeros(dim, dim);
    for l in 0..=lag.min(t_len.saturating_sub(1)) {
        let mut gamma = DMatrix::zeros(dim, dim);
        for t in l..t_len {
            let s_t = stacked.row(t);
            let s_lag = stacked.row(t - l);
            gamma.gemm(1.0, &s_t.transpose(), &s_lag, 1.0);
        }
        gamma /= t_len as f64;
        if l == 0 {
            sigma += gamma;
        } else {
            let w = 1.0 - l as f64 / (lag as f64 + 1.0);
            sigma += (&gamma + gamma.transpose()) * w;
        }
    }
    sigma
}

/// Assembles the per-unit variance matrices.
pub fn estimate_omega(
    fit: &ESFactorFit,
    panel: &PanelData,
    hac_lag: usize,
) -> Result<VarianceEstimate, EsfmError> {
    let n = panel.n;
    let t_len = panel.t_len;
    let p1 = panel.p + 1;
    let dim = n * p1;

    let a_sim = loading_similarity(fit, n)?;
    let mut x_tilde = Vec::with_capacity(n);
    for i in 0..n {
        x_tilde.push(annihilate(&fit.factors.f, &panel.x[i])?);
    }

    // Curvature inverses A_i = (X_i' M X_i / T)^{-1}; the grams themselves
    // are kept for the null-space deflation below.
    let mut grams = Vec::with_capacity(n);
    let mut a_inv = Vec::with_capacity(n);
    for (i, xt) in x_tilde.iter().enumerate() {
        let gram = xt.transpose() * xt / t_len as f64;
        let inv = gram
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(EsfmError::SingularUnit { unit: i })?;
        grams.push(gram);
        a_inv.push(inv);
    }

    // Interaction blocks H_ik = A_i (X_i' M X_k / T) a_ik.
    let mut system: DMatrix<f64> = DMatrix::identity(dim, dim);
    for i in 0..n {
        for k in 0..n {
            let a_ik = a_sim[(i, k)];
            if a_ik == 0.0 {
                continue;
            }
            let cross = x_tilde[i].transpose() * &x_tilde[k] / t_len as f64;
            let block = &a_inv[i] * cross * a_ik;
            for r in 0..p1 {
                for c in 0..p1 {
                    system[(i * p1 + r, k * p1 + c)] -= block[(r, c)] / n as f64;
                }
            }
        }
    }

    let scores = score_contributions(fit, panel)?;
    let sigma = hac_long_run(&scores.stacked, hac_lag);

    // Degenerate but well-defined case (e.g. N=1 or an exact fit): when the
    // adjusted scores cancel, the long-run covariance is zero and so is every
    // Omega_i, regardless of the resolvent.
    if sigma.norm() <= 1e-16 * scores.raw_second_moment.max(0.0) {
        let omega = vec![DMatrix::zeros(p1, p1); n];
        let se = DMatrix::zeros(n, p1);
        return Ok(VarianceEstimate { omega, se, hac_lag });
    }

    // Pseudo-inverse of S = I - H/N on the complement of its structural null
    // space. A shared design column (the intercept) makes S rank-deficient by
    // exactly rank(Lambda): for each factor m the vector with unit-k block
    // `lambda_km e_0` is annihilated, because the annihilated intercept
    // column is common to all units and `sum_k a_ik lambda_km = N lambda_im`
    // holds exactly; the matching left null vectors have blocks
    // `lambda_km (X_k' M X_k / T) e_0`. Both spaces are known analytically,
    // so with orthonormal bases N_R, N_L the bordered matrix S + N_L N_R' is
    // well conditioned and `S^+ = (S + N_L N_R')^{-1} - N_R N_L'`. A generic
    // SVD is avoided: it can silently lose accuracy on these systems. Any
    // deficiency beyond the structural directions breaks the Moore-Penrose
    // identity below and is reported as an error.
    let singular_err = |sys: &DMatrix<f64>| -> EsfmError {
        let svd = sys.clone().svd(false, false);
        let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        EsfmError::SingularSystem { min_singular_value: min_sv }
    };
    let r = fit.factors.r;
    let null_bases = if r > 0 {
        let lambda = &fit.factors.lambda;
        let mut n_r = DMatrix::zeros(dim, r);
        let mut n_l = DMatrix::zeros(dim, r);
        for m in 0..r {
            for k in 0..n {
                n_r[(k * p1, m)] = lambda[(k, m)];
                for j in 0..p1 {
                    n_l[(k * p1 + j, m)] = lambda[(k, m)] * grams[k][(j, 0)];
                }
            }
        }
        Some((n_r.qr().q(), n_l.qr().q()))
    } else {
        None
    };
    let bordered = match &null_bases {
        Some((q_r, q_l)) => &system + q_l * q_r.transpose(),
        None => system.clone(),
    };
    let inv = bordered
        .lu()
        .try_inverse()
        .ok_or_else(|| singular_err(&system))?;
    let g: DMatrix<f64> = match &null_bases {
        Some((q_r, q_l)) => inv - q_r * q_l.transpose(),
        None => inv,
    };
    let certificate = (&system * &g * &system - &system).norm();
    if !certificate.is_finite() || certificate > 1e-8 * system.norm().max(1.0) {
        return Err(singular_err(&system));
    }

    // C = G blockdiag(A_1..A_N); Omega_i = C_i Sigma C_i'.
    let mut block_diag = DMatrix::zeros(dim, dim);
    for i in 0..n {
        for r in 0..p1 {
            for c in 0..p1 {
                block_diag[(i * p1 + r, i * p1 + c)] = a_inv[i][(r, c)];
            }
        }
    }
    let c_full: DMatrix<f64> = &g * block_diag;

    let mut omega = Vec::with_capacity(n);
    let mut se = DMatrix::zeros(n, p1);
    for i in 0..n {
        let c_i = c_full.rows(i * p1, p1);
        let raw = &c_i * &sigma * c_i.transpose();
        let sym = (&raw + raw.transpose()) * 0.5;
        // Clip tiny negative eigenvalues from sampling noise.
        let eig = sym.symmetric_eigen();
        let mut rebuilt = DMatrix::zeros(p1, p1);
        for k in 0..p1 {
            let val = eig.eigenvalues[k].max(0.0);
            let v = eig.eigenvectors.column(k);
            rebuilt.gemm(val, &v, &v.transpose(), 1.0);
        }
        let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
        for j in 0..p1 {
            se[(i, j)] = (rebuilt[(j, j)] / t_len as f64).sqrt();
        }
        omega.push(rebuilt);
    }
    Ok(VarianceEstimate { omega, se, hac_lag })
}

/// Standard errors and t-statistics for the fitted coefficients.
pub fn standard_errors(ve: &VarianceEstimate, fit: &ESFactorFit) -> StandardErrors {
    let mut t = fit.b.clone();
    for i in 0..t.nrows() {
        for j in 0..t.ncols() {
            let s = ve.se[(i, j)];
            t[(i, j)] = if s > 0.0 { fit.b[(i, j)] / s } else { f64::NAN };
        }
    }
    StandardErrors { se: ve.se.clone(), t }
}
