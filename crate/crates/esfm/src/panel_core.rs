//! Core data containers and shared numeric kernels: check loss,
//! pseudo-response, factor annihilation, and projection distance.

use nalgebra::{DMatrix, DVector};
use std::fmt;

/// Tolerance for the `F'F/T = I` normalization checks.
pub const NORMALIZATION_TOL: f64 = 1e-8;

/// Errors produced across the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum EsfmError {
    /// `tau` outside the open interval (0, 1).
    BadTau(f64),
    /// Non-finite entry in an input array.
    NonFinite { what: &'static str, row: usize, col: usize },
    /// Intercept column violated: `X[i,t,0] != 1`.
    BadIntercept { unit: usize, period: usize, value: f64 },
    /// Shape or label-length mismatch.
    BadShape(String),
    /// `F'F/T` deviates from the identity beyond tolerance.
    NotNormalized { row: usize, col: usize, value: f64 },
    /// Input matrix does not have full column rank.
    RankDeficient { what: &'static str, column: usize },
    /// Singular normal-equation system for a unit, after any jitter.
    SingularUnit { unit: usize },
    /// Cross-unit system `I - H/N` numerically singular.
    SingularSystem { min_singular_value: f64 },
    /// Invalid configuration value.
    BadConfig(String),
}

impl fmt::Display for EsfmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EsfmError::BadTau(t) => write!(f, "tau must lie in (0,1), got {t}"),
            EsfmError::NonFinite { what, row, col } => {
                write!(f, "non-finite entry in {what} at ({row},{col})")
            }
            EsfmError::BadIntercept { unit, period, value } => {
                write!(f, "X[{unit},{period},0] must be 1, got {value}")
            }
            EsfmError::BadShape(msg) => write!(f, "shape mismatch: {msg}"),
            EsfmError::NotNormalized { row, col, value } => {
                write!(f, "factor normalization violated: (F'F/T)[{row},{col}] = {value}")
            }
            EsfmError::RankDeficient { what, column } => {
                write!(f, "{what} is rank deficient at column {column}")
            }
            EsfmError::SingularUnit { unit } => {
                write!(f, "singular normal equations for unit {unit}")
            }
            EsfmError::SingularSystem { min_singular_value } => {
                write!(f, "cross-unit system I - H/N is singular (min sv = {min_singular_value:e})")
            }
            EsfmError::BadConfig(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl std::error::Error for EsfmError {}

/// Tail probability level, restricted to the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailLevel {
    tau: f64,
}

impl TailLevel {
    pub fn new(tau: f64) -> Result<Self, EsfmError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(EsfmError::BadTau(tau));
        }
        Ok(TailLevel { tau })
    }

    pub fn get(self) -> f64 {
        self.tau
    }
}

/// Observed panel: `N` units, `T` periods, `p` non-intercept covariates.
///
/// `y` is stored `N x T`; `x[i]` is the `T x (p+1)` design block of unit `i`
/// whose first column is identically 1.
#[derive(Debug, Clone)]
pub struct PanelData {
    pub n: usize,
    pub t_len: usize,
    pub p: usize,
    pub y: DMatrix<f64>,
    pub x: Vec<DMatrix<f64>>,
    pub unit_labels: Option<Vec<String>>,
    pub time_labels: Option<Vec<String>>,
}

impl PanelData {
    /// Validates finiteness, the exact intercept column, and label lengths.
    pub fn new(
        y: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        unit_labels: Option<Vec<String>>,
        time_labels: Option<Vec<String>>,
    ) -> Result<Self, EsfmError> {
        let n = y.nrows();
        let t_len = y.ncols();
        if x.len() != n {
            return Err(EsfmError::BadShape(format!(
                "y has {n} units but x has {} design blocks",
                x.len()
            )));
        }
        if n == 0 || t_len == 0 {
            return Err(EsfmError::BadShape("empty panel".into()));
        }
        let p1 = x[0].ncols();
        if p1 == 0 {
            return Err(EsfmError::BadShape("design blocks need at least the intercept".into()));
        }
        for (i, xi) in x.iter().enumerate() {
            if xi.nrows() != t_len || xi.ncols() != p1 {
                return Err(EsfmError::BadShape(format!(
                    "design block {i} is {}x{}, expected {t_len}x{p1}",
                    xi.nrows(),
                    xi.ncols()
                )));
            }
            for t in 0..t_len {
                if xi[(t, 0)] != 1.0 {
                    return Err(EsfmError::BadIntercept { unit: i, period: t, value: xi[(t, 0)] });
                }
                for j in 0..p1 {
                    if !xi[(t, j)].is_finite() {
                        return Err(EsfmError::NonFinite { what: "x", row: i, col: t });
                    }
                }
            }
        }
        for i in 0..n {
            for t in 0..t_len {
                if !y[(i, t)].is_finite() {
                    return Err(EsfmError::NonFinite { what: "y", row: i, col: t });
                }
            }
        }
        if let Some(ref labels) = unit_labels {
            if labels.len() != n {
                return Err(EsfmError::BadShape(format!(
                    "{} unit labels for {n} units",
                    labels.len()
                )));
            }
        }
        if let Some(ref labels) = time_labels {
            if labels.len() != t_len {
                return Err(EsfmError::BadShape(format!(
                    "{} time labels for {t_len} periods",
                    labels.len()
                )));
            }
        }
        Ok(PanelData { n, t_len, p: p1 - 1, y, x, unit_labels, time_labels })
    }
}

/// Latent factor estimate: `f` is `T x r` with `F'F/T = I_r`, `lambda` is `N x r`.
///
/// Sign convention: every column of `f` has nonnegative sum; a zero sum is
/// broken by requiring the first nonzero entry to be positive.
#[derive(Debug, Clone)]
pub struct FactorBundle {
    pub r: usize,
    pub f: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

impl FactorBundle {
    pub fn empty(n: usize, t_len: usize) -> Self {
        FactorBundle { r: 0, f: DMatrix::zeros(t_len, 0), lambda: DMatrix::zeros(n, 0) }
    }

    /// Checks `F'F/T = I_r` within `NORMALIZATION_TOL`.
    pub fn check_normalization(&self) -> Result<(), EsfmError> {
        check_factor_normalization(&self.f)
    }
}

/// Verifies `F'F/T = I_r` within tolerance, reporting the worst Gram entry.
pub fn check_factor_normalization(f: &DMatrix<f64>) -> Result<(), EsfmError> {
    let r = f.ncols();
    if r == 0 {
        return Ok(());
    }
    let t_len = f.nrows() as f64;
    let gram = f.transpose() * f / t_len;
    for a in 0..r {
        for b in 0..r {
            let target = if a == b { 1.0 } else { 0.0 };
            let v = gram[(a, b)];
            if (v - target).abs() > NORMALIZATION_TOL {
                return Err(EsfmError::NotNormalized { row: a, col: b, value: v });
            }
        }
    }
    Ok(())
}

/// Check loss `rho_tau(u) = (tau - 1{u<0}) u`; nonnegative, zero only at zero.
pub fn check_loss(u: f64, tau: TailLevel) -> f64 {
    let t = tau.get();
    if u < 0.0 {
        (t - 1.0) * u
    } else {
        t * u
    }
}

/// Pseudo-response `z = (y-q) 1{y<=q} + tau q` and its rescaling `z* = z/tau`.
///
/// `q` is the fitted tau-quantile for the observation; `E[z* | X]` equals the
/// conditional expected shortfall, which makes `z*` the Stage-2 response.
pub fn pseudo_response(y: f64, q: f64, tau: TailLevel) -> (f64, f64) {
    let t = tau.get();
    let z = if y <= q { (y - q) + t * q } else { t * q };
    (z, z / t)
}

/// Applies the annihilator `M_F = I - FF'/T` to `v` as `v - F(F'v)/T`.
///
/// Never materializes the `T x T` projector. `F` must satisfy `F'F/T = I_r`;
/// `r = 0` returns `v` unchanged.
pub fn annihilate(f: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>, EsfmError> {
    if f.ncols() == 0 {
        return Ok(v.clone());
    }
    if f.nrows() != v.nrows() {
        return Err(EsfmError::BadShape(format!(
            "annihilate: F has {} rows, V has {}",
            f.nrows(),
            v.nrows()
        )));
    }
    check_factor_normalization(f)?;
    let t_len = f.nrows() as f64;
    let coef = f.transpose() * v;
    Ok(v - f * coef / t_len)
}

/// Thin orthonormal basis of the column space via QR; errors if the input is
/// rank deficient (diagonal of R checked against a scaled threshold).
pub(crate) fn orthonormal_basis(
    m: &DMatrix<f64>,
    what: &'static str,
) -> Result<DMatrix<f64>, EsfmError> {
    let cols = m.ncols();
    if cols == 0 {
        return Ok(DMatrix::zeros(m.nrows(), 0));
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let scale = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let threshold = 1e-12 * scale * (m.nrows() as f64).sqrt();
    for j in 0..cols {
        if r[(j, j)].abs() <= threshold {
            return Err(EsfmError::RankDeficient { what, column: j });
        }
    }
    Ok(qr.q())
}

/// Rotation-invariant distance `||P_a - P_b||_F^2 / T` between the column
/// spaces of `f_a` and `f_b`, via `r_a + r_b - 2 tr(P_a P_b)` on thin
/// orthonormal bases. Clamped at zero against floating-point cancellation.
pub fn projection_distance(f_a: &DMatrix<f64>, f_b: &DMatrix<f64>) -> Result<f64, EsfmError> {
    if f_a.nrows() != f_b.nrows() {
        return Err(EsfmError::BadShape(format!(
            "projection_distance: {} vs {} rows",
            f_a.nrows(),
            f_b.nrows()
        )));
    }
    let t_len = f_a.nrows() as f64;
    let qa = orthonormal_basis(f_a, "F_a")?;
    let qb = orthonormal_basis(f_b, "F_b")?;
    let (ra, rb) = (qa.ncols(), qb.ncols());
    let cross = qa.transpose() * qb;
    let overlap: f64 = cross.iter().map(|v| v * v).sum();
    let dist = (ra as f64 + rb as f64 - 2.0 * overlap).max(0.0);
    Ok(dist / t_len)
}

/// Per-unit OLS of `y_i` on `x_i` by normal equations with a QR fallback.
pub(crate) fn ols(
    x_i: &DMatrix<f64>,
    y_i: &DVector<f64>,
    what: &'static str,
) -> Result<DVector<f64>, EsfmError> {
    let gram = x_i.transpose() * x_i;
    let rhs = x_i.transpose() * y_i;
    if let Some(chol) = gram.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    // Cholesky failure signals (near-)collinearity; column-pivoted QR names
    // the first column that adds no rank.
    let qr = x_i.clone().col_piv_qr();
    let r = qr.r();
    let scale = x_i.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let threshold = 1e-12 * scale * (x_i.nrows() as f64).sqrt();
    let mut col_ids = nalgebra::RowDVector::<f64>::from_fn(x_i.ncols(), |_, j| j as f64);
    qr.p().permute_columns(&mut col_ids);
    for j in 0..r.ncols().min(r.nrows()) {
        if r[(j, j)].abs() <= threshold {
            return Err(EsfmError::RankDeficient { what, column: col_ids[j] as usize });
        }
    }
    qr.solve(y_i).ok_or(EsfmError::RankDeficient { what, column: 0 })
}
