//! Acceptance gate: one test per shipping criterion, each printing a single
//! PASS/FAIL line with the measured quantities before asserting.
//!
//! Heavy Monte Carlo criteria serialize on a shared lock so concurrent test
//! threads cannot distort each other's measured runtimes. Stated runtime
//! budgets assume an 8-worker box; on smaller machines the equivalent
//! total-work bound (budget x 8 / cores) is asserted instead.

use esfm::asset_pricing::{
    alpha_regression, fama_macbeth, generalized_correlations, newey_west_cov,
};
use esfm::dgp_sim::{generate_scenario, run_monte_carlo};
use esfm::es_factor_stage::{
    fit_es_factor_model, fit_es_factor_model_from, pseudo_response_matrix,
};
use esfm::inference::{default_hac_lag, estimate_omega, standard_errors};
use esfm::panel_core::projection_distance;
use esfm::quantile_stage::{
    below_quantile_fraction, exact_objective, fit_panel_quantile, fit_unit_quantile,
};
use esfm::{FitOptions, PanelData, QrOptions, RPolicy, ScenarioConfig, TailLevel};
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use std::sync::Mutex;
use std::time::Instant;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_guard() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Runtime budgets are stated for 8 workers; below 8 cores assert the
/// equivalent total-work bound instead of the unachievable wall-clock one.
fn runtime_cap(budget_secs: f64) -> f64 {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) as f64;
    if cores >= 8.0 {
        budget_secs
    } else {
        budget_secs * 8.0 / cores.max(1.0)
    }
}

fn report(id: &str, pass: bool, detail: &str) {
    eprintln!("criterion {id}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
}

fn random_panel(rng: &mut StdRng, n: usize, t_len: usize, p: usize) -> PanelData {
    let mut x = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x_i = DMatrix::from_element(t_len, p + 1, 1.0);
        for t in 0..t_len {
            for j in 1..=p {
                x_i[(t, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        x.push(x_i);
    }
    let y = DMatrix::from_fn(n, t_len, |_, _| rng.sample::<f64, _>(StandardNormal) - 1.0);
    PanelData::new(y, x, None, None).unwrap()
}

#[test]
fn criterion_01_no_factor_fit_equals_least_squares() {
    let started = Instant::now();
    let tau = TailLevel::new(0.10).unwrap();
    let mut rng = StdRng::seed_from_u64(101);
    let mut max_dev = 0.0_f64;
    for _ in 0..100 {
        let p = rng.random_range(0..=3usize);
        let n = rng.random_range(2..=20usize);
        let t_len = rng.random_range((p + 3).max(8)..=50usize);
        let panel = random_panel(&mut rng, n, t_len, p);
        let qfit = fit_panel_quantile(&panel, tau, &QrOptions::default()).unwrap();
        let zstar = pseudo_response_matrix(&panel, &qfit.a, tau);
        let fit =
            fit_es_factor_model_from(&panel, &zstar, 0, &FitOptions::default(), None).unwrap();
        for i in 0..n {
            let x_i = &panel.x[i];
            let z_i = DVector::from_iterator(t_len, (0..t_len).map(|t| zstar[(i, t)]));
            let ols = (x_i.transpose() * x_i)
                .cholesky()
                .unwrap()
                .solve(&(x_i.transpose() * z_i));
            for j in 0..=p {
                max_dev = max_dev.max((fit.b[(i, j)] - ols[j]).abs());
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = max_dev <= 1e-10 && secs < 5.0;
    report(
        "01",
        pass,
        &format!("no-factor fit vs least squares on 100 instances: max dev {max_dev:.2e} (tol 1e-10), {secs:.2}s (budget 5s)"),
    );
    assert!(pass, "max dev {max_dev:.3e}, runtime {secs:.2}s");
}

#[test]
fn criterion_02_noiseless_rank2_recovery() {
    let started = Instant::now();
    let (n, t_len, p, r) = (50usize, 100usize, 2usize, 2usize);
    let mut rng = StdRng::seed_from_u64(202);
    let panel = random_panel(&mut rng, n, t_len, p);

    let mut b0 = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        for j in 0..=p {
            b0[(i, j)] = rng.random_range(1.0..2.0);
        }
    }
    // Demeaned orthonormalized factors so the intercept column cannot absorb
    // any factor component.
    let mut f_raw = DMatrix::from_fn(t_len, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    for m in 0..r {
        let mean = f_raw.column(m).mean();
        for t in 0..t_len {
            f_raw[(t, m)] -= mean;
        }
    }
    let f0 = f_raw.qr().q() * (t_len as f64).sqrt();
    let lambda0 = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));

    let mut zstar = DMatrix::zeros(n, t_len);
    for i in 0..n {
        for t in 0..t_len {
            let mut v = 0.0;
            for j in 0..=p {
                v += panel.x[i][(t, j)] * b0[(i, j)];
            }
            for m in 0..r {
                v += lambda0[(i, m)] * f0[(t, m)];
            }
            zstar[(i, t)] = v;
        }
    }

    let opts = FitOptions { max_iterations: 5000, tolerance: 1e-13, ..FitOptions::default() };
    let fit = fit_es_factor_model_from(&panel, &zstar, r, &opts, None).unwrap();
    let objective = *fit.objective_path.last().unwrap();
    let mut slope_err = 0.0_f64;
    for i in 0..n {
        for j in 1..=p {
            slope_err = slope_err.max((fit.b[(i, j)] - b0[(i, j)]).abs());
        }
    }
    let proj = projection_distance(&fit.factors.f, &f0).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let pass = objective <= 1e-10 && slope_err <= 1e-4 && proj <= 1e-6 && secs < 10.0;
    report(
        "02",
        pass,
        &format!("noiseless N=50 T=100 r=2: objective {objective:.2e} (tol 1e-10), max slope dev {slope_err:.2e} (tol 1e-4), factor space dist {proj:.2e} (tol 1e-6), {secs:.2}s (budget 10s)"),
    );
    assert!(pass, "objective {objective:.3e}, slope {slope_err:.3e}, proj {proj:.3e}, {secs:.2}s");
}

/// Exact-loss descent over single-row basis swaps from one starting basis.
/// A swap-optimal vertex of the convex check loss is globally optimal when
/// rows are in general position, so any start reaches the same value.
fn vertex_descent(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: TailLevel,
    mut basis: Vec<usize>,
) -> Option<f64> {
    let t_len = x.nrows();
    let k = x.ncols();
    let solve = |basis: &[usize]| -> Option<DVector<f64>> {
        let xb = DMatrix::from_fn(k, k, |r, c| x[(basis[r], c)]);
        let yb = DVector::from_fn(k, |r, _| y[basis[r]]);
        let sol = xb.lu().solve(&yb)?;
        sol.iter().all(|v| v.is_finite()).then_some(sol)
    };
    let mut best = exact_objective(x, y, &solve(&basis)?, tau);
    for _ in 0..500 {
        let mut improved = false;
        for pos in 0..k {
            let mut found: Option<(usize, f64)> = None;
            for t in 0..t_len {
                if basis.contains(&t) {
                    continue;
                }
                let saved = basis[pos];
                basis[pos] = t;
                if let Some(a) = solve(&basis) {
                    let obj = exact_objective(x, y, &a, tau);
                    if obj < found.map_or(best - 1e-14, |(_, v)| v) {
                        found = Some((t, obj));
                    }
                }
                basis[pos] = saved;
            }
            if let Some((t, obj)) = found {
                basis[pos] = t;
                best = obj;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    Some(best)
}

/// Reference optimum independent of the library solver: descents started
/// from the least-squares active set and from random row subsets.
fn vertex_oracle(x: &DMatrix<f64>, y: &DVector<f64>, tau: TailLevel, rng: &mut StdRng) -> f64 {
    let t_len = x.nrows();
    let k = x.ncols();
    let ols = (x.transpose() * x).cholesky().unwrap().solve(&(x.transpose() * y));
    let fitted = x * ols;
    let mut by_resid: Vec<(f64, usize)> =
        (0..t_len).map(|t| ((y[t] - fitted[t]).abs(), t)).collect();
    by_resid.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = f64::INFINITY;
    if let Some(v) = vertex_descent(x, y, tau, by_resid[..k].iter().map(|r| r.1).collect()) {
        best = best.min(v);
    }
    for _ in 0..2 {
        let mut rows: Vec<usize> = Vec::with_capacity(k);
        while rows.len() < k {
            let t = rng.random_range(0..t_len);
            if !rows.contains(&t) {
                rows.push(t);
            }
        }
        if let Some(v) = vertex_descent(x, y, tau, rows) {
            best = best.min(v);
        }
    }
    best
}

#[test]
fn criterion_03_quantile_solver_matches_vertex_oracle() {
    let tau = TailLevel::new(0.10).unwrap();
    let (t_len, p) = (200usize, 3usize);
    let band = 2.0 * (p + 1) as f64 / t_len as f64;
    let mut rng = StdRng::seed_from_u64(303);
    let mut max_gap = f64::NEG_INFINITY;
    let mut frac_lo = f64::INFINITY;
    let mut frac_hi = f64::NEG_INFINITY;
    for inst in 0..50 {
        let mut x = DMatrix::from_element(t_len, p + 1, 1.0);
        for t in 0..t_len {
            for j in 1..=p {
                x[(t, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let alpha: Vec<f64> = (0..=p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = DVector::from_fn(t_len, |t, _| {
            let mean: f64 = (0..=p).map(|j| x[(t, j)] * alpha[j]).sum();
            let scale = 0.5 + 0.5 * x[(t, 1)].abs();
            mean + scale * rng.sample::<f64, _>(StandardNormal)
        });
        let (a_hat, _) = fit_unit_quantile(&x, &y, tau, &QrOptions::default()).unwrap();
        let solver_obj = exact_objective(&x, &y, &a_hat, tau);
        let oracle_obj = vertex_oracle(&x, &y, tau, &mut rng);
        let gap = (solver_obj - oracle_obj).abs() / (1.0 + oracle_obj.abs());
        max_gap = max_gap.max(gap);
        assert!(
            gap <= 1e-6,
            "instance {inst}: solver {solver_obj:.10e} vs oracle {oracle_obj:.10e}"
        );
        let frac = below_quantile_fraction(&x, &y, &a_hat);
        frac_lo = frac_lo.min(frac);
        frac_hi = frac_hi.max(frac);
    }
    let pass = max_gap <= 1e-6 && frac_lo >= 0.10 - band && frac_hi <= 0.10 + band;
    report(
        "03",
        pass,
        &format!("50 instances T=200 p=3: max relative loss gap {max_gap:.2e} (tol 1e-6), below-fraction range [{frac_lo:.3}, {frac_hi:.3}] (band 0.10 +/- {band:.3})"),
    );
    assert!(pass, "gap {max_gap:.3e}, fractions [{frac_lo:.4}, {frac_hi:.4}]");
}

#[test]
fn criterion_04_orthogonal_score_gradient_within_noise() {
    let started = Instant::now();
    let t_len = 100_000usize;
    let p = 3usize;
    let tau = 0.10;
    let mut rng = StdRng::seed_from_u64(404);
    // Standardized heavy-tailed innovations; the lower-tail quantile of the
    // scaled law shifts the intercept so the planted plane is the true
    // conditional quantile.
    let dof = 5.0_f64;
    let t_quantile_10 = -1.4758840488244813_f64;
    let q_eps = t_quantile_10 / (dof / (dof - 2.0)).sqrt();
    let student = rand_distr::StudentT::new(dof).unwrap();
    let scale = (dof / (dof - 2.0)).sqrt();

    let alpha_loc = [0.5, 1.0, -1.0, 0.3];
    let mut x = DMatrix::from_element(t_len, p + 1, 1.0);
    let mut y = DVector::zeros(t_len);
    for t in 0..t_len {
        for j in 1..=p {
            x[(t, j)] = rng.sample::<f64, _>(StandardNormal);
        }
        let mean: f64 = (0..=p).map(|j| x[(t, j)] * alpha_loc[j]).sum();
        y[t] = mean + rng.sample::<f64, _>(student) / scale;
    }
    let mut alpha0 = DVector::from_column_slice(&alpha_loc);
    alpha0[0] += q_eps;

    let pseudo_mean_terms = |a: &DVector<f64>, out: &mut Vec<f64>| {
        out.clear();
        for t in 0..t_len {
            let q: f64 = (0..=p).map(|j| x[(t, j)] * a[j]).sum();
            let dev = if y[t] <= q { y[t] - q } else { 0.0 };
            out.push(dev + tau * q);
        }
    };

    let h = 0.02;
    let mut up = Vec::with_capacity(t_len);
    let mut dn = Vec::with_capacity(t_len);
    let mut worst_ratio = 0.0_f64;
    let mut detail = String::new();
    for j in 0..=p {
        let mut a_up = alpha0.clone();
        a_up[j] += h;
        let mut a_dn = alpha0.clone();
        a_dn[j] -= h;
        pseudo_mean_terms(&a_up, &mut up);
        pseudo_mean_terms(&a_dn, &mut dn);
        let quotients: Vec<f64> =
            (0..t_len).map(|t| (up[t] - dn[t]) / (2.0 * h)).collect();
        let mean = quotients.iter().sum::<f64>() / t_len as f64;
        let var = quotients.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (t_len as f64 - 1.0);
        let se = (var / t_len as f64).sqrt();
        let ratio = mean.abs() / se;
        worst_ratio = worst_ratio.max(ratio);
        detail.push_str(&format!("g{j}={mean:+.2e} (se {se:.1e}) "));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst_ratio <= 3.0 && secs < 30.0;
    report(
        "04",
        pass,
        &format!("pseudo-response mean gradient at the true plane, T=1e5: {detail}worst |g|/se {worst_ratio:.2} (tol 3), {secs:.1}s (budget 30s)"),
    );
    assert!(pass, "worst ratio {worst_ratio:.3}, {secs:.1}s");
}

#[test]
fn criterion_05_slope_rmse_beats_no_factor_benchmark_across_grid() {
    let _guard = heavy_guard();
    let started = Instant::now();
    let mut wins = 0usize;
    let mut cells = 0usize;
    let mut anchor_rmse = f64::NAN;
    let mut lines = String::new();
    for scenario in 1..=7usize {
        for tau in [0.05, 0.10] {
            for t_len in [100usize, 200] {
                let cfg = ScenarioConfig::new(scenario, 100, t_len, tau, 500).unwrap();
                let campaign =
                    run_monte_carlo(&cfg, 20, RPolicy::Fixed(cfg.r0), 8).unwrap();
                let agg = &campaign.aggregates;
                cells += 1;
                let win = agg.rmse_beta_esfm < agg.rmse_beta_esr;
                if win {
                    wins += 1;
                }
                if scenario == 1 && tau == 0.10 && t_len == 100 {
                    anchor_rmse = agg.rmse_beta_esfm;
                }
                lines.push_str(&format!(
                    "  s{scenario} tau={tau:.2} T={t_len}: factor {:.4} vs none {:.4} ({}; {} of 20 converged)\n",
                    agg.rmse_beta_esfm,
                    agg.rmse_beta_esr,
                    if win { "win" } else { "loss" },
                    agg.included,
                ));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let need = (0.9 * cells as f64).ceil() as usize;
    let anchor_ok = (0.25..=0.50).contains(&anchor_rmse);
    let budget = runtime_cap(20.0 * 60.0);
    let pass = wins >= need && anchor_ok && secs < budget;
    eprint!("{lines}");
    report(
        "05",
        pass,
        &format!("factor model beats no-factor benchmark in {wins}/{cells} cells (need {need}); anchor cell slope RMSE {anchor_rmse:.4} (band [0.25, 0.50]); {secs:.0}s (cap {budget:.0}s)"),
    );
    assert!(
        pass,
        "wins {wins}/{cells} (need {need}), anchor RMSE {anchor_rmse:.4}, {secs:.0}s (cap {budget:.0}s)"
    );
}

#[test]
fn criterion_06_factor_space_error_shrinks_with_t() {
    let _guard = heavy_guard();
    let mut aggs = Vec::new();
    let mut per_rep: Vec<Vec<Option<f64>>> = Vec::new();
    for t_len in [100usize, 200, 300] {
        let cfg = ScenarioConfig::new(1, 100, t_len, 0.10, 600).unwrap();
        let campaign = run_monte_carlo(&cfg, 20, RPolicy::Fixed(cfg.r0), 8).unwrap();
        aggs.push(campaign.aggregates.factor_space_error);
        per_rep.push(
            campaign
                .records
                .iter()
                .map(|r| r.converged.then_some(r.factor_space_error))
                .collect(),
        );
    }
    // Pair replications across adjacent panel lengths by index; aggregates
    // only include converged records, so pairs do too.
    let mut decreasing = 0usize;
    let mut pairs = 0usize;
    for step in 0..2 {
        let n = per_rep[step].len().min(per_rep[step + 1].len());
        for k in 0..n {
            if let (Some(lo), Some(hi)) = (per_rep[step][k], per_rep[step + 1][k]) {
                pairs += 1;
                if hi < lo {
                    decreasing += 1;
                }
            }
        }
    }
    let frac = decreasing as f64 / pairs as f64;
    let bound_ok = [100.0_f64, 200.0, 300.0]
        .iter()
        .zip(&aggs)
        .all(|(t, v)| *v <= 2.0 * 2.0 / *t);
    let agg_monotone = aggs[0] > aggs[1] && aggs[1] > aggs[2];
    let pass = frac >= 0.9 && bound_ok && agg_monotone;
    report(
        "06",
        pass,
        &format!("factor space error at T=100/200/300: aggregates {:.4}/{:.4}/{:.4} (monotone: {agg_monotone}), per-replication decreasing {decreasing}/{pairs} ({frac:.2}, need 0.90), within 2r/T bound: {bound_ok}", aggs[0], aggs[1], aggs[2]),
    );
    assert!(pass, "fraction {frac:.3}, aggregates {aggs:?}, bound {bound_ok}");
}

#[test]
fn criterion_07_selected_factor_count_mean() {
    let _guard = heavy_guard();
    let started = Instant::now();
    let cfg = ScenarioConfig::new(1, 100, 100, 0.10, 700).unwrap();
    let campaign = run_monte_carlo(&cfg, 50, RPolicy::ICSelected { r_max: 4 }, 8).unwrap();
    let mean_r = campaign.aggregates.r_hat_mean.unwrap_or(f64::NAN);
    let secs = started.elapsed().as_secs_f64();
    let budget = runtime_cap(15.0 * 60.0);
    let pass = (1.7..=2.4).contains(&mean_r) && secs < budget;
    report(
        "07",
        pass,
        &format!("mean selected factor count over 50 replications: {mean_r:.2} (band [1.7, 2.4]); {secs:.0}s (cap {budget:.0}s)"),
    );
    assert!(pass, "mean r {mean_r:.3}, {secs:.0}s (cap {budget:.0}s)");
}

#[test]
fn criterion_08_tail_mean_bias_ordering_at_5pct() {
    let _guard = heavy_guard();
    let cfg = ScenarioConfig::new(1, 100, 100, 0.05, 800).unwrap();
    let campaign = run_monte_carlo(&cfg, 20, RPolicy::Fixed(cfg.r0), 8).unwrap();
    let agg = &campaign.aggregates;
    let pass = agg.es_bias_abs_esfm < agg.es_bias_abs_esr;
    report(
        "08",
        pass,
        &format!("mean absolute tail-mean error, tau=0.05: factor {:.4} vs no-factor {:.4} ({} of 20 converged)", agg.es_bias_abs_esfm, agg.es_bias_abs_esr, agg.included),
    );
    assert!(pass, "factor {:.4} vs no-factor {:.4}", agg.es_bias_abs_esfm, agg.es_bias_abs_esr);
}

#[test]
fn criterion_09_slope_error_shrinks_at_root_t_rate() {
    let _guard = heavy_guard();
    let tau = TailLevel::new(0.10).unwrap();
    // Median absolute slope error pooled over units, covariates, and
    // converged replications: the rate statistic for the typical
    // coefficient. Per-replication RMSE is unusable here because single
    // degenerate units dominate the within-replication mean of squares.
    let mut medians = Vec::new();
    let mut kept = Vec::new();
    for t_len in [100usize, 400] {
        let mut errs: Vec<f64> = Vec::new();
        let mut converged = 0usize;
        for rep in 0..20u64 {
            let mut cfg = ScenarioConfig::new(1, 100, t_len, 0.10, 900).unwrap();
            cfg.rep_stream = rep;
            let (panel, truth) = generate_scenario(&cfg).unwrap();
            let qfit = fit_panel_quantile(&panel, tau, &QrOptions::default()).unwrap();
            let fit =
                fit_es_factor_model(&panel, &qfit, tau, cfg.r0, &FitOptions::default()).unwrap();
            if !fit.converged {
                continue;
            }
            converged += 1;
            for i in 0..panel.n {
                for j in 0..panel.p {
                    errs.push((fit.b[(i, j + 1)] - truth.beta0_slopes[(i, j)]).abs());
                }
            }
        }
        assert!(converged >= 5, "only {converged} of 20 replications converged at T={t_len}");
        errs.sort_by(|a, b| a.total_cmp(b));
        medians.push(errs[errs.len() / 2]);
        kept.push(converged);
    }
    let ratio = medians[0] / medians[1];
    let pass = (1.6..=2.6).contains(&ratio);
    report(
        "09",
        pass,
        &format!(
            "median absolute slope error {:.4} at T=100 ({} of 20 replications converged) vs {:.4} at T=400 ({} of 20): ratio {ratio:.2} (band [1.6, 2.6], quadrupling T should halve the error)",
            medians[0], kept[0], medians[1], kept[1]
        ),
    );
    assert!(pass, "ratio {ratio:.3}");
}

#[test]
fn criterion_10_interval_coverage_and_psd_variances() {
    let _guard = heavy_guard();
    let started = Instant::now();
    let base = ScenarioConfig::new(1, 100, 200, 0.10, 1000).unwrap();
    let tau = TailLevel::new(base.tau).unwrap();
    // Slow replications need ~10k alternating sweeps at this size; the cap
    // is set so essentially every replication converges.
    let opts = FitOptions { max_iterations: 20_000, ..FitOptions::default() };
    let reps = 200usize;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
    let outcomes: Vec<Option<(Vec<f64>, f64)>> = pool.install(|| {
        use rayon::prelude::*;
        (0..reps)
            .into_par_iter()
            .map(|rep| {
                let mut cfg = base.clone();
                cfg.rep_stream = rep as u64;
                let (panel, truth) = generate_scenario(&cfg).ok()?;
                let qfit = fit_panel_quantile(&panel, tau, &QrOptions::default()).ok()?;
                let fit = fit_es_factor_model(&panel, &qfit, tau, cfg.r0, &opts).ok()?;
                if !fit.converged {
                    return None;
                }
                let ve = estimate_omega(&fit, &panel, default_hac_lag(panel.t_len)).ok()?;
                let errs = standard_errors(&ve, &fit);
                // Most negative variance eigenvalue, relative to block scale.
                let mut worst_eig = 0.0_f64;
                for om in &ve.omega {
                    let eig = om.clone().symmetric_eigen();
                    let scale = om.norm().max(1e-300);
                    for e in eig.eigenvalues.iter() {
                        worst_eig = worst_eig.min(e / scale);
                    }
                }
                let mut zs = Vec::with_capacity(panel.n * panel.p);
                for i in 0..panel.n {
                    for j in 0..panel.p {
                        let se = errs.se[(i, j + 1)];
                        if se > 0.0 && se.is_finite() {
                            zs.push((fit.b[(i, j + 1)] - truth.beta0_slopes[(i, j)]) / se);
                        }
                    }
                }
                Some((zs, worst_eig))
            })
            .collect()
    });

    let converged = outcomes.iter().flatten().count();
    let mut covered = 0usize;
    let mut total = 0usize;
    let mut worst_eig = 0.0_f64;
    for (zs, we) in outcomes.into_iter().flatten() {
        worst_eig = worst_eig.min(we);
        for z in zs {
            total += 1;
            if z.abs() <= 1.96 {
                covered += 1;
            }
        }
    }
    let coverage = covered as f64 / total.max(1) as f64;
    let psd_ok = worst_eig >= -1e-10;
    let secs = started.elapsed().as_secs_f64();
    let budget = runtime_cap(30.0 * 60.0);
    let pass = (0.85..=0.99).contains(&coverage) && psd_ok && converged >= 150 && secs < budget;
    report(
        "10",
        pass,
        &format!("slope interval coverage {coverage:.3} over {total} statistics from {converged}/{reps} converged replications (band [0.85, 0.99]); most negative relative variance eigenvalue {worst_eig:.1e}; {secs:.0}s (cap {budget:.0}s)"),
    );
    assert!(
        pass,
        "coverage {coverage:.4}, converged {converged}, worst eig {worst_eig:.2e}, {secs:.0}s"
    );
}

#[test]
fn criterion_11_portfolio_pipeline_properties() {
    let mut rng = StdRng::seed_from_u64(1100);
    let t_len = 240usize;

    // Exactly spanned portfolio: zero intercept to rounding noise.
    let bench = DMatrix::from_fn(t_len, 3, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.04);
    let weights = [0.8, -0.3, 0.5];
    let spanned = DVector::from_fn(t_len, |t, _| {
        (0..3).map(|j| bench[(t, j)] * weights[j]).sum::<f64>()
    });
    let (alpha_pct, _) = alpha_regression(&spanned, &bench, 6).unwrap();
    let alpha_ok = alpha_pct.abs() <= 1e-8;

    // Exact linear cross-section: premia equal the planted values.
    let (n, k) = (30usize, 2usize);
    let lambda = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let gamma = [0.6, -0.4];
    let gamma0 = 0.25;
    let mut f = DMatrix::from_fn(t_len, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    for m in 0..k {
        let mean = f.column(m).mean();
        for t in 0..t_len {
            f[(t, m)] -= mean;
        }
    }
    let returns = DMatrix::from_fn(n, t_len, |i, t| {
        gamma0
            + (0..k)
                .map(|m| lambda[(i, m)] * (f[(t, m)] + gamma[m]))
                .sum::<f64>()
    });
    let fm = fama_macbeth(&returns, &f, "planted").unwrap();
    let fm_dev = (0..k)
        .map(|m| (fm.premia[m] - 100.0 * gamma[m]).abs())
        .fold((fm.intercept - 100.0 * gamma0).abs(), f64::max);
    let fm_ok = fm_dev <= 1e-8 * 100.0;

    // Rotation invariance of the subspace overlap measure.
    let fa = DMatrix::from_fn(t_len, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let fb = DMatrix::from_fn(t_len, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let rot = DMatrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
    let base = generalized_correlations(&fa, &fb).unwrap();
    let rotated = generalized_correlations(&(&fa * &rot), &fb).unwrap();
    let self_rot = generalized_correlations(&fa, &(&fa * &rot)).unwrap();
    let gc_dev = base
        .iter()
        .zip(&rotated)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max)
        .max(self_rot.iter().map(|v| (v - 1.0).abs()).fold(0.0_f64, f64::max));
    let gc_ok = gc_dev <= 1e-8;

    // Zero-lag long-run covariance equals the squared-residual sandwich.
    let x = {
        let mut m = DMatrix::from_element(60, 2, 1.0);
        for t in 0..60 {
            m[(t, 1)] = rng.sample::<f64, _>(StandardNormal);
        }
        m
    };
    let u = DVector::from_fn(60, |t, _| 0.1 + 0.5 * x[(t, 1)].abs() * rng.sample::<f64, _>(StandardNormal));
    let nw0 = newey_west_cov(&x, &u, 0).unwrap();
    let bread = (x.transpose() * &x).try_inverse().unwrap();
    let mut meat = DMatrix::zeros(2, 2);
    for t in 0..60 {
        let row = x.row(t).transpose() * u[t];
        meat += &row * row.transpose();
    }
    let white = &bread * meat * &bread;
    let nw_dev = (&nw0 - &white).norm();
    let nw_ok = nw_dev <= 1e-12 * white.norm().max(1.0);

    let pass = alpha_ok && fm_ok && gc_ok && nw_ok;
    report(
        "11",
        pass,
        &format!("spanned-portfolio intercept {alpha_pct:.1e} (tol 1e-8); planted-premia max dev {fm_dev:.1e}; overlap rotation dev {gc_dev:.1e}; zero-lag vs squared-residual sandwich dev {nw_dev:.1e}"),
    );
    assert!(pass, "alpha {alpha_ok} fm {fm_ok} gc {gc_ok} nw {nw_ok}");
}

#[test]
fn criterion_12_simulation_reports_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (tag, workers, env) in
        [("a", Some("1"), None), ("b", Some("4"), None), ("c", None, Some("2"))]
    {
        let out = dir.path().join(tag);
        let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_esfm"));
        cmd.arg("simulate")
            .args(["--scenario", "5", "--n", "16", "--t", "40", "--tau", "0.1"])
            .args(["--reps", "4", "--r", "2", "--seed", "123"])
            .arg("--out")
            .arg(&out)
            .env_remove("ESFM_WORKERS");
        if let Some(w) = workers {
            cmd.args(["--workers", w]);
        }
        if let Some(e) = env {
            cmd.env("ESFM_WORKERS", e);
        }
        let status = cmd.status().unwrap();
        assert!(status.success());
        outputs.push(std::fs::read_to_string(out.join("sim_report.json")).unwrap());
    }
    let pass = outputs[0] == outputs[1] && outputs[0] == outputs[2];
    report(
        "12",
        pass,
        &format!("simulation report bytes identical across worker counts 1/4/env-2: {pass} ({} bytes)", outputs[0].len()),
    );
    assert!(pass);
}
