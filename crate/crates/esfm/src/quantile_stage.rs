//! Stage 1: per-unit linear quantile regression minimizing the check loss.
//!
//! Solver: majorize-minimize on a Huber-smoothed check loss with a
//! geometrically decreasing bandwidth, each level solved by iteratively
//! reweighted least squares, followed by a vertex polish that accepts an
//! interpolating basic solution only when it strictly improves the exact
//! check loss.

use crate::panel_core::{check_loss, ols, EsfmError, PanelData, TailLevel};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Solver controls for the smoothed quantile fit.
#[derive(Debug, Clone, Copy)]
pub struct QrOptions {
    /// Lower bound for the initial bandwidth `h0 = max(floor, sd(Y_i))`.
    pub bandwidth_init_floor: f64,
    /// Geometric decay factor applied to the bandwidth per outer level.
    pub bandwidth_decay: f64,
    /// Terminal bandwidth.
    pub bandwidth_min: f64,
    /// Coefficient-change tolerance for the inner IRLS loop.
    pub coef_tolerance: f64,
    /// Cap on total IRLS iterations across all bandwidth levels.
    pub max_iterations: usize,
}

impl Default for QrOptions {
    fn default() -> Self {
        QrOptions {
            bandwidth_init_floor: 1.0,
            bandwidth_decay: 0.3,
            bandwidth_min: 1e-6,
            coef_tolerance: 1e-8,
            max_iterations: 200,
        }
    }
}

impl QrOptions {
    pub fn validate(&self) -> Result<(), EsfmError> {
        if !(self.bandwidth_init_floor > self.bandwidth_min && self.bandwidth_min > 0.0) {
            return Err(EsfmError::BadConfig(
                "bandwidth schedule requires h0_floor > h_min > 0".into(),
            ));
        }
        if !(self.bandwidth_decay > 0.0 && self.bandwidth_decay < 1.0) {
            return Err(EsfmError::BadConfig("bandwidth decay must lie in (0,1)".into()));
        }
        if !(self.coef_tolerance > 0.0) {
            return Err(EsfmError::BadConfig("coefficient tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Per-unit solver diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct UnitDiagnostics {
    pub iterations: usize,
    pub smoothed_objective: f64,
    pub exact_objective: f64,
    pub converged: bool,
}

/// Stage-1 result: row `i` of `a` holds the coefficients of unit `i`.
#[derive(Debug, Clone)]
pub struct QuantileFit {
    pub a: DMatrix<f64>,
    pub diagnostics: Vec<UnitDiagnostics>,
}

/// Mean exact check loss of the residuals `y - X a`.
pub fn exact_objective(
    x_i: &DMatrix<f64>,
    y_i: &DVector<f64>,
    a: &DVector<f64>,
    tau: TailLevel,
) -> f64 {
    let fitted = x_i * a;
    let t_len = y_i.len();
    let mut total = 0.0;
    for t in 0..t_len {
        total += check_loss(y_i[t] - fitted[t], tau);
    }
    total / t_len as f64
}

/// Smoothed check loss: the kink of `|u|` is replaced by `u^2/(2h) + h/2`
/// on `|u| <= h`, keeping the linear tilt `(tau - 1/2) u` exact.
fn smoothed_objective(
    x_i: &DMatrix<f64>,
    y_i: &DVector<f64>,
    a: &DVector<f64>,
    tau: TailLevel,
    h: f64,
) -> f64 {
    let fitted = x_i * a;
    let t = tau.get();
    let t_len = y_i.len();
    let mut total = 0.0;
    for s in 0..t_len {
        let u = y_i[s] - fitted[s];
        let abs_part = if u.abs() <= h { u * u / (2.0 * h) + h / 2.0 } else { u.abs() };
        total += 0.5 * abs_part + (t - 0.5) * u;
    }
    total / t_len as f64
}

/// One IRLS pass at bandwidth `h`; returns the new coefficients and the
/// number of iterations spent. The majorizer weight for residual `u0` is
/// `omega = 1/(2 max(|u0|, h))` with pseudo-response `y + (tau - 1/2)/omega`.
fn irls_at_bandwidth(
    x_i: &DMatrix<f64>,
    y_i: &DVector<f64>,
    a0: DVector<f64>,
    tau: TailLevel,
    h: f64,
    tol: f64,
    max_steps: usize,
    unit: usize,
) -> Result<(DVector<f64>, usize), EsfmError> {
    let t = tau.get();
    let t_len = y_i.len();
    let p1 = x_i.ncols();
    let mut a = a0;
    let mut steps = 0;
    for _ in 0..max_steps {
        steps += 1;
        let fitted = x_i * &a;
        let mut gram = DMatrix::zeros(p1, p1);
        let mut rhs = DVector::zeros(p1);
        for s in 0..t_len {
            let u = y_i[s] - fitted[s];
            let w = u.abs().max(h);
            let omega = 1.0 / (2.0 * w);
            let z = y_i[s] + (t - 0.5) / omega;
            let row = x_i.row(s);
            for j in 0..p1 {
                rhs[j] += omega * row[j] * z;
                for k in j..p1 {
                    gram[(j, k)] += omega * row[j] * row[k];
                }
            }
        }
        for j in 0..p1 {
            for k in 0..j {
                gram[(j, k)] = gram[(k, j)];
            }
        }
        let a_new = gram
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or(EsfmError::SingularUnit { unit })?;
        let step = (&a_new - &a).norm();
        a = a_new;
        if step < tol * (1.0 + a.norm()) {
            break;
        }
    }
    Ok((a, steps))
}

/// Exact-loss descent over basic solutions. Starts from the `p+1`
/// smallest-residual rows of the incoming fit and repeatedly applies the
/// best single-row basis swap while one strictly lowers the exact loss.
/// A swap-optimal vertex of this piecewise-linear convex loss is a global
/// minimizer when the rows are in general position.
fn vertex_polish(
    x_i: &DMatrix<f64>,
    y_i: &DVector<f64>,
    a: &DVector<f64>,
    tau: TailLevel,
) -> Option<DVector<f64>> {
    let t_len = y_i.len();
    let p1 = x_i.ncols();
    if t_len < p1 {
        return None;
    }
    let fitted = x_i * a;
    let mut order: Vec<usize> = (0..t_len).collect();
    order.sort_by(|&a_idx, &b_idx| {
        let ra = (y_i[a_idx] - fitted[a_idx]).abs();
        let rb = (y_i[b_idx] - fitted[b_idx]).abs();
        ra.partial_cmp(&rb).unwrap().then(a_idx.cmp(&b_idx))
    });
    let mut basis: Vec<usize> = order[..p1].to_vec();

    let solve = |basis: &[usize]| -> Option<DVector<f64>> {
        let basis_x = DMatrix::from_fn(p1, p1, |row, col| x_i[(basis[row], col)]);
        let basis_y = DVector::from_fn(p1, |row, _| y_i[basis[row]]);
        let sol = basis_x.lu().solve(&basis_y)?;
        sol.iter().all(|v| v.is_finite()).then_some(sol)
    };

    let mut best = solve(&basis)?;
    let mut best_obj = exact_objective(x_i, y_i, &best, tau);
    let mut in_basis = vec![false; t_len];
    for &idx in &basis {
        in_basis[idx] = true;
    }

    // Strict-improvement slack keeps degenerate ties from cycling.
    let slack = 1e-13 * (1.0 + best_obj.abs());
    for _ in 0..200 {
        let mut improved = false;
        for pos in 0..p1 {
            let saved = basis[pos];
            let mut pick: Option<(usize, f64, DVector<f64>)> = None;
            for cand in 0..t_len {
                if in_basis[cand] {
                    continue;
                }
                basis[pos] = cand;
                if let Some(sol) = solve(&basis) {
                    let obj = exact_objective(x_i, y_i, &sol, tau);
                    let bar = pick.as_ref().map_or(best_obj - slack, |p| p.1);
                    if obj < bar {
                        pick = Some((cand, obj, sol));
                    }
                }
            }
            basis[pos] = saved;
            if let Some((cand, obj, sol)) = pick {
                in_basis[saved] = false;
                in_basis[cand] = true;
                basis[pos] = cand;
                best = sol;
                best_obj = obj;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }

    (best_obj < exact_objective(x_i, y_i, a, tau)).then_some(best)
}

/// Fits the tau-quantile regression of `y_i` on `x_i`.
pub fn fit_unit_quantile(
    x_i: &DMatrix<f64>,
    y_i: &DVector<f64>,
    tau: TailLevel,
    opts: &QrOptions,
) -> Result<(DVector<f64>, UnitDiagnostics), EsfmError> {
    fit_unit_quantile_indexed(x_i, y_i, tau, opts, 0)
}

fn fit_unit_quantile_indexed(
    x_i: &DMatrix<f64>,
    y_i: &DVector<f64>,
    tau: TailLevel,
    opts: &QrOptions,
    unit: usize,
) -> Result<(DVector<f64>, UnitDiagnostics), EsfmError> {
    opts.validate()?;
    let t_len = y_i.len();
    let p1 = x_i.ncols();
    if x_i.nrows() != t_len {
        return Err(EsfmError::BadShape(format!(
            "unit {unit}: design has {} rows for {t_len} responses",
            x_i.nrows()
        )));
    }
    if t_len <= p1 {
        return Err(EsfmError::BadShape(format!(
            "unit {unit}: need T > p+1, got T={t_len}, p+1={p1}"
        )));
    }

    // Degenerate constant response: zero loss at intercept = that constant.
    let y0 = y_i[0];
    if y_i.iter().all(|&v| v == y0) {
        let mut a = DVector::zeros(p1);
        a[0] = y0;
        let diag = UnitDiagnostics {
            iterations: 0,
            smoothed_objective: 0.0,
            exact_objective: 0.0,
            converged: true,
        };
        return Ok((a, diag));
    }

    let warm = ols(x_i, y_i, "quantile design")?;
    let mean = y_i.mean();
    let sd = (y_i.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t_len as f64).sqrt();
    let mut h = sd.max(opts.bandwidth_init_floor);

    let mut a = warm.clone();
    let mut used = 0usize;
    let mut converged = true;
    loop {
        let budget = opts.max_iterations.saturating_sub(used).min(50);
        if budget == 0 {
            converged = false;
            break;
        }
        let (a_new, steps) =
            irls_at_bandwidth(x_i, y_i, a, tau, h, opts.coef_tolerance, budget, unit)?;
        a = a_new;
        used += steps;
        if h <= opts.bandwidth_min {
            break;
        }
        h = (h * opts.bandwidth_decay).max(opts.bandwidth_min);
    }

    if let Some(polished) = vertex_polish(x_i, y_i, &a, tau) {
        a = polished;
    }
    // The solver must never worsen the convex objective relative to the warm
    // start; fall back if smoothing stalled somewhere unfortunate.
    if exact_objective(x_i, y_i, &a, tau) > exact_objective(x_i, y_i, &warm, tau) {
        a = warm;
        converged = false;
    }

    let diag = UnitDiagnostics {
        iterations: used,
        smoothed_objective: smoothed_objective(x_i, y_i, &a, tau, opts.bandwidth_min),
        exact_objective: exact_objective(x_i, y_i, &a, tau),
        converged,
    };
    Ok((a, diag))
}

/// Fits every unit independently; results are identical for any worker count.
pub fn fit_panel_quantile(
    panel: &PanelData,
    tau: TailLevel,
    opts: &QrOptions,
) -> Result<QuantileFit, EsfmError> {
    let rows: Vec<(DVector<f64>, UnitDiagnostics)> = (0..panel.n)
        .into_par_iter()
        .map(|i| {
            let y_i = DVector::from_iterator(
                panel.t_len,
                (0..panel.t_len).map(|t| panel.y[(i, t)]),
            );
            fit_unit_quantile_indexed(&panel.x[i], &y_i, tau, opts, i)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let p1 = panel.p + 1;
    let mut a = DMatrix::zeros(panel.n, p1);
    let mut diagnostics = Vec::with_capacity(panel.n);
    for (i, (coef, diag)) in rows.into_iter().enumerate() {
        for j in 0..p1 {
            a[(i, j)] = coef[j];
        }
        diagnostics.push(diag);
    }
    Ok(QuantileFit { a, diagnostics })
}

/// Fraction of in-sample residuals strictly below zero; at an exact optimum
/// it lies within `(p+1)/T` of `tau`.
pub fn below_quantile_fraction(
    x_i: &DMatrix<f64>,
    y_i: &DVector<f64>,
    a: &DVector<f64>,
) -> f64 {
    let fitted = x_i * a;
    let below = (0..y_i.len()).filter(|&t| y_i[t] - fitted[t] < 0.0).count();
    below as f64 / y_i.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn intercept_only(values: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let t = values.len();
        (DMatrix::from_element(t, 1, 1.0), DVector::from_column_slice(values))
    }

    #[test]
    fn median_of_three() {
        // T=3 > p+1=1; the 0.5-quantile of {1,2,3} is the sample median.
        let (x, y) = intercept_only(&[1.0, 2.0, 3.0]);
        let tau = TailLevel::new(0.5).unwrap();
        let (a, diag) = fit_unit_quantile(&x, &y, tau, &QrOptions::default()).unwrap();
        assert_relative_eq!(a[0], 2.0, epsilon = 1e-6);
        assert!(diag.converged);
    }

    #[test]
    fn flat_region_quartile() {
        // The exact 0.25-loss of {1,2,3,4} is flat on [1,2]; any point there
        // is optimal. A grid oracle confirms the optimum value.
        let (x, y) = intercept_only(&[1.0, 2.0, 3.0, 4.0]);
        let tau = TailLevel::new(0.25).unwrap();
        let (a, _) = fit_unit_quantile(&x, &y, tau, &QrOptions::default()).unwrap();
        assert!(a[0] >= 1.0 - 1e-6 && a[0] <= 2.0 + 1e-6, "got {}", a[0]);

        let opt = (0..=400)
            .map(|k| {
                let c = DVector::from_element(1, k as f64 * 0.01);
                exact_objective(&x, &y, &c, tau)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(exact_objective(&x, &y, &a, tau) <= opt + 1e-9);
    }

    #[test]
    fn interpolating_fit_has_zero_loss() {
        let t_len = 12;
        let xs: Vec<f64> = (0..t_len).map(|t| (t as f64 * 0.7).sin()).collect();
        let mut x = DMatrix::from_element(t_len, 2, 1.0);
        for t in 0..t_len {
            x[(t, 1)] = xs[t];
        }
        let y = DVector::from_iterator(t_len, xs.iter().map(|v| 2.0 * v));
        for tau in [0.1, 0.5, 0.9] {
            let tau = TailLevel::new(tau).unwrap();
            let (a, diag) = fit_unit_quantile(&x, &y, tau, &QrOptions::default()).unwrap();
            assert_relative_eq!(a[0], 0.0, epsilon = 1e-6);
            assert_relative_eq!(a[1], 2.0, epsilon = 1e-6);
            assert!(diag.exact_objective <= 1e-10);
        }
    }

    #[test]
    fn constant_response_shortcut() {
        let (x, y) = intercept_only(&[3.5, 3.5, 3.5, 3.5]);
        let tau = TailLevel::new(0.1).unwrap();
        let (a, diag) = fit_unit_quantile(&x, &y, tau, &QrOptions::default()).unwrap();
        assert_eq!(a[0], 3.5);
        assert_eq!(diag.exact_objective, 0.0);
    }

    fn random_instance(seed: u64, t_len: usize, p: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut x = DMatrix::from_element(t_len, p + 1, 1.0);
        for t in 0..t_len {
            for j in 1..=p {
                x[(t, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let y = DVector::from_fn(t_len, |t, _| {
            x[(t, 1)] * 1.5 - x[(t, 2.min(p))] + rng.sample::<f64, _>(StandardNormal) * 2.0
        });
        (x, y)
    }

    #[test]
    fn never_worse_than_ols_warm_start() {
        let tau = TailLevel::new(0.1).unwrap();
        for seed in 0..20 {
            let (x, y) = random_instance(seed, 60, 2);
            let warm = ols(&x, &y, "test").unwrap();
            let (a, _) = fit_unit_quantile(&x, &y, tau, &QrOptions::default()).unwrap();
            assert!(
                exact_objective(&x, &y, &a, tau)
                    <= exact_objective(&x, &y, &warm, tau) + 1e-9
            );
        }
    }

    #[test]
    fn location_equivariance() {
        let tau = TailLevel::new(0.3).unwrap();
        let (x, y) = random_instance(7, 80, 2);
        let (a, _) = fit_unit_quantile(&x, &y, tau, &QrOptions::default()).unwrap();
        let shifted = &y + DVector::from_element(y.len(), 5.0);
        let (b, _) = fit_unit_quantile(&x, &shifted, tau, &QrOptions::default()).unwrap();
        assert_relative_eq!(b[0], a[0] + 5.0, epsilon = 1e-6);
        assert_relative_eq!(b[1], a[1], epsilon = 1e-6);
        assert_relative_eq!(b[2], a[2], epsilon = 1e-6);
    }

    #[test]
    fn scale_equivariance() {
        let tau = TailLevel::new(0.3).unwrap();
        let (x, y) = random_instance(11, 80, 2);
        let (a, _) = fit_unit_quantile(&x, &y, tau, &QrOptions::default()).unwrap();
        let mut scaled = x.clone();
        for t in 0..x.nrows() {
            scaled[(t, 1)] *= 4.0;
        }
        let (b, _) = fit_unit_quantile(&scaled, &y, tau, &QrOptions::default()).unwrap();
        assert_relative_eq!(b[1], a[1] / 4.0, epsilon = 1e-7);
        assert_relative_eq!(b[0], a[0], epsilon = 1e-6);
        assert_relative_eq!(b[2], a[2], epsilon = 1e-6);
    }

    #[test]
    fn below_fraction_near_tau() {
        for (seed, tau_v) in [(3u64, 0.1), (4, 0.25), (5, 0.5)] {
            let tau = TailLevel::new(tau_v).unwrap();
            let (x, y) = random_instance(seed, 200, 3);
            let (a, _) = fit_unit_quantile(&x, &y, tau, &QrOptions::default()).unwrap();
            let frac = below_quantile_fraction(&x, &y, &a);
            let slack = 2.0 * 4.0 / 200.0;
            assert!(
                (frac - tau_v).abs() <= slack,
                "tau={tau_v}, fraction={frac}"
            );
        }
    }

    #[test]
    fn panel_fit_matches_unit_fits_and_is_deterministic() {
        let tau = TailLevel::new(0.2).unwrap();
        let (x0, y0) = random_instance(21, 50, 2);
        let (x1, y1) = random_instance(22, 50, 2);
        let mut y = DMatrix::zeros(3, 50);
        for t in 0..50 {
            y[(0, t)] = y0[t];
            y[(1, t)] = y1[t];
            y[(2, t)] = y1[t];
        }
        // Unit 2 duplicates unit 1: identical coefficient rows expected.
        let panel =
            PanelData::new(y, vec![x0.clone(), x1.clone(), x1.clone()], None, None).unwrap();
        let fit = fit_panel_quantile(&panel, tau, &QrOptions::default()).unwrap();

        let (a0, _) = fit_unit_quantile(&x0, &y0, tau, &QrOptions::default()).unwrap();
        let (a1, _) = fit_unit_quantile(&x1, &y1, tau, &QrOptions::default()).unwrap();
        for j in 0..3 {
            assert_eq!(fit.a[(0, j)], a0[j]);
            assert_eq!(fit.a[(1, j)], a1[j]);
            assert_eq!(fit.a[(2, j)], fit.a[(1, j)]);
        }
    }

    #[test]
    fn rank_deficient_design_names_column() {
        let t_len = 30;
        let mut x = DMatrix::from_element(t_len, 3, 1.0);
        for t in 0..t_len {
            let v = (t as f64 * 0.31).cos();
            x[(t, 1)] = v;
            x[(t, 2)] = 2.0 * v; // exactly dependent on column 1
        }
        let y = DVector::from_fn(t_len, |t, _| (t as f64).sin());
        let tau = TailLevel::new(0.5).unwrap();
        match fit_unit_quantile(&x, &y, tau, &QrOptions::default()) {
            Err(EsfmError::RankDeficient { column, .. }) => assert!(column == 1 || column == 2),
            other => panic!("expected rank error, got {other:?}"),
        }
    }
}
