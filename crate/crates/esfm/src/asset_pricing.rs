//! Portfolio evaluation pipeline: rolling exposures, sorted portfolios with
//! high-minus-low spreads, HAC alpha regressions, two-pass cross-sectional
//! premia, and canonical correlations between factor sets.
//!
//! Returns are monthly simple returns; annualized figures use the simple
//! `x12, in percent` convention throughout.

use crate::panel_core::{ols, EsfmError};
use nalgebra::{DMatrix, DVector};

/// Intercept test for one benchmark set.
#[derive(Debug, Clone)]
pub struct AlphaStat {
    pub label: String,
    /// Annualized intercept in percent: `1200 x` monthly intercept.
    pub alpha_pct: f64,
    /// HAC t-statistic of the intercept.
    pub t_stat: f64,
}

/// Sorted-portfolio return series and summary statistics.
#[derive(Debug, Clone)]
pub struct SortResult {
    /// `D x G`: equal-weight group returns per decision date.
    pub group_returns: DMatrix<f64>,
    /// High minus low: last group column minus first, exactly.
    pub hl_series: DVector<f64>,
    /// `G + 1` annualized mean returns in percent; last entry is H-L.
    pub avg_annualized: Vec<f64>,
    /// Filled by `with_alphas`; empty after the sort itself.
    pub alphas: Vec<AlphaStat>,
}

/// Two-pass cross-sectional regression summary. Premia, intercept, and the
/// mean adjusted R-squared are all scaled by 100.
#[derive(Debug, Clone)]
pub struct FMResult {
    pub label: String,
    pub premia: Vec<f64>,
    pub intercept: f64,
    pub mean_adj_r2: f64,
}

/// Per-unit rolling time-series regressions of returns on the factor series.
///
/// `returns` is `N x T`, `factor_series` is `T x k`. The exposure at decision
/// time `t` (for `t = window..T-1`) comes from an OLS on the `window` periods
/// ending at `t-1`, with an intercept that is estimated but not reported.
/// Returns one `(T-window) x k` slope matrix per unit.
pub fn rolling_exposures(
    returns: &DMatrix<f64>,
    factor_series: &DMatrix<f64>,
    window: usize,
) -> Result<Vec<DMatrix<f64>>, EsfmError> {
    let n = returns.nrows();
    let t_len = returns.ncols();
    let k = factor_series.ncols();
    if factor_series.nrows() != t_len {
        return Err(EsfmError::BadShape(format!(
            "factor series has {} rows, returns have {} periods",
            factor_series.nrows(),
            t_len
        )));
    }
    if window >= t_len {
        return Err(EsfmError::BadConfig(format!(
            "rolling window {window} must be shorter than the sample {t_len}"
        )));
    }
    if window < k + 2 {
        return Err(EsfmError::BadConfig(format!(
            "rolling window {window} cannot identify {k} slopes plus an intercept"
        )));
    }
    let d = t_len - window;
    let mut x_w = DMatrix::from_element(window, k + 1, 1.0);
    let mut out = vec![DMatrix::zeros(d, k); n];
    for t in window..t_len {
        for s in 0..window {
            for j in 0..k {
                x_w[(s, j + 1)] = factor_series[(t - window + s, j)];
            }
        }
        for i in 0..n {
            let y_w = DVector::from_fn(window, |s, _| returns[(i, t - window + s)]);
            let coef = ols(&x_w, &y_w, "rolling exposure window")?;
            for j in 0..k {
                out[i][(t - window, j)] = coef[j + 1];
            }
        }
    }
    Ok(out)
}

/// Sorts units into `n_groups` near-equal groups by exposure each date and
/// equal-weights the matching realized returns.
///
/// `exposures` and `next_returns` are both `D x N` and aligned by row: row
/// `d` pairs the exposures known at a decision date with the returns realized
/// one period after the estimation window. Ties keep input order; group `g`
/// takes ranked slots `[floor(gN/G), floor((g+1)N/G))`.
pub fn sort_portfolios(
    exposures: &DMatrix<f64>,
    next_returns: &DMatrix<f64>,
    n_groups: usize,
) -> Result<SortResult, EsfmError> {
    let d = exposures.nrows();
    let n = exposures.ncols();
    if next_returns.nrows() != d || next_returns.ncols() != n {
        return Err(EsfmError::BadShape(format!(
            "exposures are {}x{}, returns are {}x{}",
            d,
            n,
            next_returns.nrows(),
            next_returns.ncols()
        )));
    }
    if n_groups < 2 {
        return Err(EsfmError::BadConfig("need at least two groups".into()));
    }
    if n < n_groups {
        return Err(EsfmError::BadConfig(format!(
            "cannot split {n} units into {n_groups} groups"
        )));
    }
    for (what, m) in [("exposures", exposures), ("sorted returns", next_returns)] {
        for date in 0..d {
            for i in 0..n {
                if !m[(date, i)].is_finite() {
                    return Err(EsfmError::NonFinite { what, row: date, col: i });
                }
            }
        }
    }

    let mut group_returns = DMatrix::zeros(d, n_groups);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for date in 0..d {
        order.clear();
        order.extend(0..n);
        // Stable sort keeps input order on ties.
        order.sort_by(|&a, &b| exposures[(date, a)].total_cmp(&exposures[(date, b)]));
        for g in 0..n_groups {
            let start = g * n / n_groups;
            let end = (g + 1) * n / n_groups;
            let mut total = 0.0;
            for slot in start..end {
                total += next_returns[(date, order[slot])];
            }
            group_returns[(date, g)] = total / (end - start) as f64;
        }
    }
    let hl_series =
        DVector::from_fn(d, |date, _| group_returns[(date, n_groups - 1)] - group_returns[(date, 0)]);
    let mut avg_annualized = Vec::with_capacity(n_groups + 1);
    for g in 0..n_groups {
        avg_annualized.push(group_returns.column(g).mean() * 1200.0);
    }
    avg_annualized.push(hl_series.mean() * 1200.0);
    Ok(SortResult { group_returns, hl_series, avg_annualized, alphas: Vec::new() })
}

impl SortResult {
    /// Runs `alpha_regression` of the H-L series on each labelled benchmark
    /// set and stores the results.
    pub fn with_alphas(
        mut self,
        benchmarks: &[(String, DMatrix<f64>)],
        lags: usize,
    ) -> Result<SortResult, EsfmError> {
        let mut alphas = Vec::with_capacity(benchmarks.len());
        for (label, bench) in benchmarks {
            let (alpha_pct, t_stat) = alpha_regression(&self.hl_series, bench, lags)?;
            alphas.push(AlphaStat { label: label.clone(), alpha_pct, t_stat });
        }
        self.alphas = alphas;
        Ok(self)
    }
}

/// Bartlett-kernel HAC covariance of OLS coefficients.
///
/// `V = (X'X)^{-1} S (X'X)^{-1}` with
/// `S = Gamma_0 + sum_{l=1..lags} (1 - l/(lags+1)) (Gamma_l + Gamma_l')` and
/// `Gamma_l = sum_t (x_t u_t)(x_{t-l} u_{t-l})'`. At `lags = 0` this is the
/// heteroskedasticity-robust covariance; the kernel keeps it PSD.
pub fn newey_west_cov(
    regressors: &DMatrix<f64>,
    residuals: &DVector<f64>,
    lags: usize,
) -> Result<DMatrix<f64>, EsfmError> {
    let t_len = regressors.nrows();
    let k = regressors.ncols();
    if residuals.len() != t_len {
        return Err(EsfmError::BadShape(format!(
            "{} residuals for {} regression rows",
            residuals.len(),
            t_len
        )));
    }
    if t_len <= k {
        return Err(EsfmError::BadShape(format!(
            "need more than {k} observations, got {t_len}"
        )));
    }
    if lags >= t_len {
        return Err(EsfmError::BadConfig(format!(
            "lag truncation {lags} must be shorter than the sample {t_len}"
        )));
    }
    let gram = regressors.transpose() * regressors;
    let bread = gram.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| {
        let eig = gram.symmetric_eigen();
        let min_sv = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
        EsfmError::SingularSystem { min_singular_value: min_sv }
    })?;

    // Moment rows m_t = x_t u_t.
    let mut m = DMatrix::zeros(t_len, k);
    for t in 0..t_len {
        for j in 0..k {
            m[(t, j)] = regressors[(t, j)] * residuals[t];
        }
    }
    let mut meat = DMatrix::zeros(k, k);
    for l in 0..=lags {
        let mut gamma = DMatrix::zeros(k, k);
        for t in l..t_len {
            let m_t = m.row(t);
            let m_lag = m.row(t - l);
            gamma.gemm(1.0, &m_t.transpose(), &m_lag, 1.0);
        }
        if l == 0 {
            meat += gamma;
        } else {
            let w = 1.0 - l as f64 / (lags as f64 + 1.0);
            meat += (&gamma + gamma.transpose()) * w;
        }
    }
    let cov = &bread * meat * &bread;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Time-series regression of a portfolio return on an intercept plus the
/// benchmark factors; reports the annualized intercept in percent and its
/// HAC t-statistic. An empty benchmark reduces the alpha to the annualized
/// mean return.
pub fn alpha_regression(
    portfolio_returns: &DVector<f64>,
    benchmark: &DMatrix<f64>,
    lags: usize,
) -> Result<(f64, f64), EsfmError> {
    let t_len = portfolio_returns.len();
    let k = benchmark.ncols();
    if k > 0 && benchmark.nrows() != t_len {
        return Err(EsfmError::BadShape(format!(
            "benchmark has {} rows, returns have {}",
            benchmark.nrows(),
            t_len
        )));
    }
    if t_len <= k + 1 {
        return Err(EsfmError::BadShape(format!(
            "need more than {} observations, got {t_len}",
            k + 1
        )));
    }
    let mut x = DMatrix::from_element(t_len, k + 1, 1.0);
    for t in 0..t_len {
        for j in 0..k {
            x[(t, j + 1)] = benchmark[(t, j)];
        }
    }
    let coef = ols(&x, portfolio_returns, "alpha regression benchmark")?;
    let residuals = portfolio_returns - &x * &coef;
    let cov = newey_west_cov(&x, &residuals, lags)?;
    let se = cov[(0, 0)].max(0.0).sqrt();
    let alpha_pct = 1200.0 * coef[0];
    // An exact fit leaves only rounding noise in the residuals; there is no
    // sampling variation to test against, so the t-statistic is undefined.
    let exact_fit = residuals.norm() <= 1e-14 * portfolio_returns.norm().max(1e-300);
    let t_stat = if exact_fit || se == 0.0 { f64::NAN } else { coef[0] / se };
    Ok((alpha_pct, t_stat))
}

/// Two-pass cross-sectional regressions.
///
/// First pass: full-sample time-series OLS of each unit's returns on an
/// intercept plus `factors`, keeping the slope loadings. Second pass: for
/// every period, cross-sectional OLS of that period's returns on an intercept
/// plus the loadings. Reported premia and intercept are 100 x the time means
/// of the per-period coefficients; the fit measure is 100 x the mean adjusted
/// R-squared.
pub fn fama_macbeth(
    returns: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    label: &str,
) -> Result<FMResult, EsfmError> {
    let n = returns.nrows();
    let t_len = returns.ncols();
    let k = factors.ncols();
    if factors.nrows() != t_len {
        return Err(EsfmError::BadShape(format!(
            "factor series has {} rows, returns have {} periods",
            factors.nrows(),
            t_len
        )));
    }
    if t_len <= k + 1 || n <= k + 1 {
        return Err(EsfmError::BadShape(format!(
            "two-pass regression with {k} factors needs N and T above {}",
            k + 1
        )));
    }

    let mut x_ts = DMatrix::from_element(t_len, k + 1, 1.0);
    for t in 0..t_len {
        for j in 0..k {
            x_ts[(t, j + 1)] = factors[(t, j)];
        }
    }
    let mut loadings = DMatrix::from_element(n, k + 1, 1.0);
    for i in 0..n {
        let y_i = DVector::from_fn(t_len, |t, _| returns[(i, t)]);
        let coef = ols(&x_ts, &y_i, "first-pass factor series")?;
        for j in 0..k {
            loadings[(i, j + 1)] = coef[j + 1];
        }
    }

    let mut coef_sum = DVector::zeros(k + 1);
    let mut adj_r2_sum = 0.0;
    for t in 0..t_len {
        let y_t = DVector::from_fn(n, |i, _| returns[(i, t)]);
        let coef = ols(&loadings, &y_t, "cross-section of loadings")?;
        coef_sum += &coef;
        let resid = &y_t - &loadings * &coef;
        let mean = y_t.mean();
        let sst: f64 = y_t.iter().map(|v| (v - mean) * (v - mean)).sum();
        if sst > 1e-300 {
            let r2 = 1.0 - resid.norm_squared() / sst;
            adj_r2_sum += 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - k as f64 - 1.0);
        }
    }
    let scale = 100.0 / t_len as f64;
    Ok(FMResult {
        label: label.to_string(),
        premia: (0..k).map(|j| coef_sum[j + 1] * scale).collect(),
        intercept: coef_sum[0] * scale,
        mean_adj_r2: adj_r2_sum * scale,
    })
}

/// Ordered canonical correlations between the column spaces of two factor
/// sets: the singular values of `Qa' Qb` for orthonormal bases `Qa`, `Qb`,
/// descending and clamped to `[0, 1]`. Invariant to invertible
/// right-multiplication of either argument.
pub fn generalized_correlations(
    f_a: &DMatrix<f64>,
    f_b: &DMatrix<f64>,
) -> Result<Vec<f64>, EsfmError> {
    if f_a.nrows() != f_b.nrows() {
        return Err(EsfmError::BadShape(format!(
            "factor sets cover {} and {} periods",
            f_a.nrows(),
            f_b.nrows()
        )));
    }
    let q_a = full_rank_basis(f_a)?;
    let q_b = full_rank_basis(f_b)?;
    let m = q_a.transpose() * q_b;
    // Singular values via the smaller-side gram; the robust symmetric
    // eigensolver is enough because the values only get reported, never
    // inverted.
    let gram = if m.nrows() <= m.ncols() { &m * m.transpose() } else { m.transpose() * &m };
    let eig = gram.symmetric_eigen();
    let mut values: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt().min(1.0))
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Orthonormal basis of the column space; errors with the offending column
/// if the input is rank deficient.
fn full_rank_basis(f: &DMatrix<f64>) -> Result<DMatrix<f64>, EsfmError> {
    let t_len = f.nrows();
    let r = f.ncols();
    if r == 0 || t_len < r {
        return Err(EsfmError::BadShape(format!(
            "cannot orthonormalize {r} columns over {t_len} rows"
        )));
    }
    let qr = f.clone().col_piv_qr();
    let rr = qr.r();
    let scale = f.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let threshold = 1e-12 * scale * (t_len as f64).sqrt();
    let mut col_ids = nalgebra::RowDVector::<f64>::from_fn(r, |_, j| j as f64);
    qr.p().permute_columns(&mut col_ids);
    for j in 0..r {
        if rr[(j, j)].abs() <= threshold {
            return Err(EsfmError::RankDeficient { what: "factor set", column: col_ids[j] as usize });
        }
    }
    // The permuted Q spans the same column space.
    Ok(qr.q().columns(0, r).into_owned())
}

/// High-minus-low return series of portfolios sorted on rolling exposures to
/// the first column of `factor`: the factor-mimicking construction used when
/// comparing estimated factor spaces on returns data.
pub fn factor_mimicking_series(
    returns: &DMatrix<f64>,
    factor: &DMatrix<f64>,
    window: usize,
    n_groups: usize,
) -> Result<DVector<f64>, EsfmError> {
    if factor.ncols() == 0 {
        return Err(EsfmError::BadShape("factor matrix has no columns".into()));
    }
    let n = returns.nrows();
    let t_len = returns.ncols();
    let first = DMatrix::from_fn(t_len, 1, |t, _| factor[(t, 0)]);
    let expos = rolling_exposures(returns, &first, window)?;
    let d = t_len - window;
    let exposure = DMatrix::from_fn(d, n, |date, i| expos[i][(date, 0)]);
    let realized = DMatrix::from_fn(d, n, |date, i| returns[(i, window + date)]);
    Ok(sort_portfolios(&exposure, &realized, n_groups)?.hl_series)
}
