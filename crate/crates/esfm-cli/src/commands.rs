//! Subcommand bodies: load inputs, run the library, emit artifacts.
//!
//! Every command writes its tables plus a `manifest.json` naming each emitted
//! file (the manifest included); on any error the partial outputs are removed
//! before the error propagates.

use crate::config::{EstimateSpec, FmSpec, GcSpec, SelectRSpec, SimulateSpec, SortSpec};
use crate::data_io::{
    align_times, csv_float, load_factor_csv, load_panel_csv, panel_time_labels,
    panel_unit_labels, render_csv,
};
use crate::errors::CliError;
use crate::json_out::J;
use esfm::asset_pricing::{alpha_regression, generalized_correlations, rolling_exposures,
    sort_portfolios};
use esfm::dgp_sim::run_monte_carlo;
use esfm::es_factor_stage::fit_es_factor_model;
use esfm::factor_selection::select_num_factors;
use esfm::inference::{default_hac_lag, estimate_omega, standard_errors};
use esfm::quantile_stage::fit_panel_quantile;
use esfm::{RPolicy, ScenarioConfig, SimulationReport, TailLevel};
use nalgebra::DMatrix;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Collects the files a command writes so they can be listed in the manifest
/// or removed together when the command fails partway.
pub struct OutputTracker {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutputTracker {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(OutputTracker { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, content).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `manifest.json` last; its file list includes the manifest
    /// itself so every artifact on disk is referenced.
    pub fn finish(
        &mut self,
        command: &str,
        config: J,
        seed: J,
        results: J,
        started: Instant,
    ) -> Result<(), CliError> {
        self.files.push("manifest.json".to_string());
        let files = J::Arr(self.files.iter().map(|f| J::Str(f.clone())).collect());
        let manifest = J::Obj(vec![
            ("command", J::Str(command.to_string())),
            ("config", config),
            ("seed", seed),
            ("results", results),
            ("files", files),
            (
                "versions",
                J::Obj(vec![
                    ("esfm_cli", J::Str(env!("CARGO_PKG_VERSION").to_string())),
                    ("format", J::Str("1".to_string())),
                ]),
            ),
            ("wall_clock_secs", J::Num(started.elapsed().as_secs_f64())),
        ]);
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, manifest.render()).map_err(|e| CliError::io(&path, e))
    }

    /// Removes everything written so far; called on command failure.
    pub fn cleanup(&self) {
        for name in &self.files {
            let _ = std::fs::remove_file(self.dir.join(name));
        }
    }
}

fn with_tracker(
    out: &Path,
    body: impl FnOnce(&mut OutputTracker) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut tracker = OutputTracker::new(out)?;
    match body(&mut tracker) {
        Ok(()) => Ok(()),
        Err(e) => {
            tracker.cleanup();
            Err(e)
        }
    }
}

fn path_str(p: &Path) -> J {
    J::Str(p.display().to_string())
}

// ---------------------------------------------------------------- estimate

pub fn run_estimate(spec: &EstimateSpec) -> Result<(), CliError> {
    let started = Instant::now();
    with_tracker(&spec.out, |tracker| {
        let panel = load_panel_csv(&spec.panel)?;
        let tau = TailLevel::new(spec.tau).map_err(CliError::from_load)?;
        let qfit =
            fit_panel_quantile(&panel, tau, &spec.qr).map_err(CliError::from_compute)?;
        let fit = fit_es_factor_model(&panel, &qfit, tau, spec.r, &spec.fit)
            .map_err(CliError::from_compute)?;
        let hac_lag = spec.lags.unwrap_or_else(|| default_hac_lag(panel.t_len));
        let ve = estimate_omega(&fit, &panel, hac_lag).map_err(CliError::from_compute)?;
        let errs = standard_errors(&ve, &fit);

        let units = panel_unit_labels(&panel);
        let times = panel_time_labels(&panel);
        let p1 = panel.p + 1;
        let r = fit.factors.r;

        let mut header = vec!["unit".to_string()];
        header.extend((0..p1).map(|j| format!("b{j}")));
        let rows: Vec<Vec<String>> = (0..panel.n)
            .map(|i| {
                let mut row = vec![units[i].clone()];
                row.extend((0..p1).map(|j| csv_float(fit.b[(i, j)])));
                row
            })
            .collect();
        tracker.write("coefficients.csv", &render_csv(&header, &rows))?;

        let mut header = vec!["unit".to_string()];
        header.extend((0..p1).map(|j| format!("se{j}")));
        header.extend((0..p1).map(|j| format!("t{j}")));
        let rows: Vec<Vec<String>> = (0..panel.n)
            .map(|i| {
                let mut row = vec![units[i].clone()];
                row.extend((0..p1).map(|j| csv_float(errs.se[(i, j)])));
                row.extend((0..p1).map(|j| csv_float(errs.t[(i, j)])));
                row
            })
            .collect();
        tracker.write("se.csv", &render_csv(&header, &rows))?;

        let mut header = vec!["time".to_string()];
        header.extend((0..r).map(|m| format!("f{}", m + 1)));
        let rows: Vec<Vec<String>> = (0..panel.t_len)
            .map(|t| {
                let mut row = vec![times[t].clone()];
                row.extend((0..r).map(|m| csv_float(fit.factors.f[(t, m)])));
                row
            })
            .collect();
        tracker.write("factors.csv", &render_csv(&header, &rows))?;

        let mut header = vec!["unit".to_string()];
        header.extend((0..r).map(|m| format!("lambda{}", m + 1)));
        let rows: Vec<Vec<String>> = (0..panel.n)
            .map(|i| {
                let mut row = vec![units[i].clone()];
                row.extend((0..r).map(|m| csv_float(fit.factors.lambda[(i, m)])));
                row
            })
            .collect();
        tracker.write("loadings.csv", &render_csv(&header, &rows))?;

        let config = J::Obj(vec![
            ("panel", path_str(&spec.panel)),
            ("tau", J::Num(spec.tau)),
            ("r", J::Int(spec.r as i64)),
            ("max_iterations", J::Int(spec.fit.max_iterations as i64)),
            ("tolerance", J::Num(spec.fit.tolerance)),
            ("lags", J::Int(hac_lag as i64)),
            ("out", path_str(&spec.out)),
        ]);
        let results = J::Obj(vec![
            ("converged", J::Bool(fit.converged)),
            ("iterations", J::Int(fit.iterations as i64)),
            ("objective", J::Num(*fit.objective_path.last().unwrap())),
            ("r", J::Int(r as i64)),
            ("hac_lag", J::Int(hac_lag as i64)),
            ("jitter_applied", J::Bool(fit.jitter_applied)),
        ]);
        tracker.finish("estimate", config, J::Null, results, started)
    })
}

// ---------------------------------------------------------------- select-r

pub fn run_select_r(spec: &SelectRSpec) -> Result<(), CliError> {
    let started = Instant::now();
    with_tracker(&spec.out, |tracker| {
        let panel = load_panel_csv(&spec.panel)?;
        let tau = TailLevel::new(spec.tau).map_err(CliError::from_load)?;
        let qfit =
            fit_panel_quantile(&panel, tau, &spec.qr).map_err(CliError::from_compute)?;
        let sel = select_num_factors(&panel, &qfit, tau, spec.r_max, &spec.fit)
            .map_err(CliError::from_compute)?;

        let header: Vec<String> =
            ["r", "v", "ic", "selected"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<String>> = sel
            .candidates
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                vec![
                    r.to_string(),
                    csv_float(sel.v[k]),
                    csv_float(sel.ic[k]),
                    if r == sel.r_hat { "1" } else { "0" }.to_string(),
                ]
            })
            .collect();
        tracker.write("ic.csv", &render_csv(&header, &rows))?;

        let config = J::Obj(vec![
            ("panel", path_str(&spec.panel)),
            ("tau", J::Num(spec.tau)),
            ("r_max", J::Int(spec.r_max as i64)),
            ("max_iterations", J::Int(spec.fit.max_iterations as i64)),
            ("tolerance", J::Num(spec.fit.tolerance)),
            ("out", path_str(&spec.out)),
        ]);
        let results = J::Obj(vec![
            ("r_hat", J::Int(sel.r_hat as i64)),
            ("penalty", J::Num(esfm::factor_selection::penalty(panel.n, panel.t_len))),
            ("candidates", J::Int(sel.candidates.len() as i64)),
        ]);
        tracker.finish("select-r", config, J::Null, results, started)
    })
}

// ---------------------------------------------------------------- simulate

/// Scenario echo shared by the deterministic report and the manifest;
/// `rep_stream` is loop state, not configuration, so it is not echoed.
fn scenario_json(cfg: &ScenarioConfig) -> J {
    J::Obj(vec![
        ("scenario", J::Int(cfg.scenario_id as i64)),
        ("n", J::Int(cfg.n as i64)),
        ("t", J::Int(cfg.t_len as i64)),
        ("tau", J::Num(cfg.tau)),
        ("p", J::Int(cfg.p as i64)),
        ("r0", J::Int(cfg.r0 as i64)),
        ("t_dof", J::Num(cfg.t_dof)),
        ("ar_coeff", J::Num(cfg.ar_coeff)),
        ("c_sigma", J::Num(cfg.c_sigma)),
        ("sigma_lo", J::Num(cfg.sigma_bounds.0)),
        ("sigma_hi", J::Num(cfg.sigma_bounds.1)),
        ("group_count", J::Int(cfg.group_count as i64)),
        ("group_shift", J::Num(cfg.group_shift)),
        ("endog_weight", J::Num(cfg.endog_weight)),
        ("jump_prob", J::Num(cfg.jump_prob)),
        ("jump_scale", J::Num(cfg.jump_scale)),
        ("asym_prob", J::Num(cfg.asym_prob)),
        ("asym_rate", J::Num(cfg.asym_rate)),
        ("seed", J::UInt(cfg.seed)),
    ])
}

fn policy_json(policy: RPolicy) -> J {
    match policy {
        RPolicy::Fixed(r) => J::Obj(vec![
            ("kind", J::Str("fixed".to_string())),
            ("r", J::Int(r as i64)),
        ]),
        RPolicy::ICSelected { r_max } => J::Obj(vec![
            ("kind", J::Str("ic".to_string())),
            ("r_max", J::Int(r_max as i64)),
        ]),
    }
}

/// Worker-count-independent report body; wall-clock time stays out so reruns
/// are byte-identical.
fn report_json(report: &SimulationReport) -> J {
    let records: Vec<J> = report
        .records
        .iter()
        .map(|rec| {
            J::Obj(vec![
                ("replication", J::Int(rec.replication as i64)),
                ("r_used", J::Int(rec.r_used as i64)),
                ("r_hat", rec.r_hat.map_or(J::Null, |r| J::Int(r as i64))),
                ("converged", J::Bool(rec.converged)),
                ("rmse_beta_esfm", J::Num(rec.rmse_beta_esfm)),
                ("rmse_beta_esr", J::Num(rec.rmse_beta_esr)),
                ("factor_space_error", J::Num(rec.factor_space_error)),
                ("es_bias_signed_esfm", J::Num(rec.es_bias_signed_esfm)),
                ("es_bias_abs_esfm", J::Num(rec.es_bias_abs_esfm)),
                ("es_bias_signed_esr", J::Num(rec.es_bias_signed_esr)),
                ("es_bias_abs_esr", J::Num(rec.es_bias_abs_esr)),
            ])
        })
        .collect();
    let failures: Vec<J> = report
        .failures
        .iter()
        .map(|(rep, msg)| {
            J::Obj(vec![
                ("replication", J::Int(*rep as i64)),
                ("message", J::Str(msg.clone())),
            ])
        })
        .collect();
    let agg = &report.aggregates;
    J::Obj(vec![
        ("config", scenario_json(&report.config)),
        ("replications", J::Int(report.replications as i64)),
        ("r_policy", policy_json(report.r_policy)),
        ("records", J::Arr(records)),
        ("failures", J::Arr(failures)),
        (
            "aggregates",
            J::Obj(vec![
                ("included", J::Int(agg.included as i64)),
                ("excluded", J::Int(agg.excluded as i64)),
                ("rmse_beta_esfm", J::Num(agg.rmse_beta_esfm)),
                ("rmse_beta_esr", J::Num(agg.rmse_beta_esr)),
                ("factor_space_error", J::Num(agg.factor_space_error)),
                ("es_bias_signed_esfm", J::Num(agg.es_bias_signed_esfm)),
                ("es_bias_abs_esfm", J::Num(agg.es_bias_abs_esfm)),
                ("es_bias_signed_esr", J::Num(agg.es_bias_signed_esr)),
                ("es_bias_abs_esr", J::Num(agg.es_bias_abs_esr)),
                ("r_hat_mean", agg.r_hat_mean.map_or(J::Null, J::Num)),
            ]),
        ),
    ])
}

pub fn run_simulate(spec: &SimulateSpec) -> Result<(), CliError> {
    let started = Instant::now();
    with_tracker(&spec.out, |tracker| {
        let report = run_monte_carlo(&spec.cfg, spec.reps, spec.policy, spec.workers)
            .map_err(CliError::from_compute)?;
        let cfg = &report.config;
        let agg = &report.aggregates;
        let id_cells = vec![
            cfg.scenario_id.to_string(),
            csv_float(cfg.tau),
            cfg.n.to_string(),
            cfg.t_len.to_string(),
        ];

        let header: Vec<String> =
            ["scenario", "tau", "n", "t", "reps", "included", "excluded", "rmse_esfm",
             "rmse_esr"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        let mut row = id_cells.clone();
        row.extend([
            report.replications.to_string(),
            agg.included.to_string(),
            agg.excluded.to_string(),
            csv_float(agg.rmse_beta_esfm),
            csv_float(agg.rmse_beta_esr),
        ]);
        tracker.write("sim_rmse.csv", &render_csv(&header, &[row]))?;

        let header: Vec<String> =
            ["scenario", "tau", "n", "t", "included", "factor_space_error", "r_hat_mean"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        let mut row = id_cells.clone();
        row.extend([
            agg.included.to_string(),
            csv_float(agg.factor_space_error),
            agg.r_hat_mean.map_or(String::new(), csv_float),
        ]);
        tracker.write("sim_facerr.csv", &render_csv(&header, &[row]))?;

        let header: Vec<String> = ["scenario", "tau", "n", "t", "included", "signed_esfm",
            "abs_esfm", "signed_esr", "abs_esr"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut row = id_cells;
        row.extend([
            agg.included.to_string(),
            csv_float(agg.es_bias_signed_esfm),
            csv_float(agg.es_bias_abs_esfm),
            csv_float(agg.es_bias_signed_esr),
            csv_float(agg.es_bias_abs_esr),
        ]);
        tracker.write("sim_esbias.csv", &render_csv(&header, &[row]))?;

        tracker.write("sim_report.json", &report_json(&report).render())?;

        let config = J::Obj(vec![
            ("scenario", scenario_json(cfg)),
            ("reps", J::Int(spec.reps as i64)),
            ("r_policy", policy_json(spec.policy)),
            ("workers", J::Int(spec.workers as i64)),
            ("out", path_str(&spec.out)),
        ]);
        let results = J::Obj(vec![
            ("included", J::Int(agg.included as i64)),
            ("excluded", J::Int(agg.excluded as i64)),
            ("rmse_beta_esfm", J::Num(agg.rmse_beta_esfm)),
            ("rmse_beta_esr", J::Num(agg.rmse_beta_esr)),
        ]);
        tracker.finish("simulate", config, J::UInt(cfg.seed), results, started)
    })
}

// -------------------------------------------------------------------- sort

/// Excess returns when the factor file carries a risk-free column, raw
/// returns otherwise.
fn returns_matrix(y: &DMatrix<f64>, rf: Option<&nalgebra::DVector<f64>>) -> DMatrix<f64> {
    match rf {
        Some(rf) => DMatrix::from_fn(y.nrows(), y.ncols(), |i, t| y[(i, t)] - rf[t]),
        None => y.clone(),
    }
}

pub fn run_sort(spec: &SortSpec) -> Result<(), CliError> {
    let started = Instant::now();
    with_tracker(&spec.out, |tracker| {
        let panel = load_panel_csv(&spec.panel)?;
        let table = load_factor_csv(&spec.factors)?;
        align_times(&panel_time_labels(&panel), &table, &spec.factors)?;
        let returns = returns_matrix(&panel.y, table.rf.as_ref());
        let t_len = panel.t_len;
        let window = spec.window;

        // Exposure to the first factor column drives the sort; realized
        // returns are the period right after each estimation window.
        let first = DMatrix::from_fn(t_len, 1, |t, _| table.values[(t, 0)]);
        let expos =
            rolling_exposures(&returns, &first, window).map_err(CliError::from_compute)?;
        let d = t_len - window;
        let exposure = DMatrix::from_fn(d, panel.n, |date, i| expos[i][(date, 0)]);
        let realized = DMatrix::from_fn(d, panel.n, |date, i| returns[(i, window + date)]);
        let sorted = sort_portfolios(&exposure, &realized, spec.groups)
            .map_err(CliError::from_compute)?;

        // Alphas control for every factor column over the realized periods.
        let bench =
            DMatrix::from_fn(d, table.values.ncols(), |date, j| table.values[(window + date, j)]);
        let mut alpha_rows: Vec<(f64, f64)> = Vec::with_capacity(spec.groups + 1);
        for g in 0..spec.groups {
            let series = sorted.group_returns.column(g).into_owned();
            alpha_rows
                .push(alpha_regression(&series, &bench, spec.lags).map_err(CliError::from_compute)?);
        }
        alpha_rows.push(
            alpha_regression(&sorted.hl_series, &bench, spec.lags)
                .map_err(CliError::from_compute)?,
        );

        let header: Vec<String> = ["portfolio", "avg_annualized_pct", "alpha_pct", "alpha_t"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = (0..=spec.groups)
            .map(|g| {
                let label =
                    if g == spec.groups { "HL".to_string() } else { (g + 1).to_string() };
                vec![
                    label,
                    csv_float(sorted.avg_annualized[g]),
                    csv_float(alpha_rows[g].0),
                    csv_float(alpha_rows[g].1),
                ]
            })
            .collect();
        tracker.write("sorts.csv", &render_csv(&header, &rows))?;

        let config = J::Obj(vec![
            ("panel", path_str(&spec.panel)),
            ("factors", path_str(&spec.factors)),
            ("window", J::Int(spec.window as i64)),
            ("groups", J::Int(spec.groups as i64)),
            ("lags", J::Int(spec.lags as i64)),
            ("out", path_str(&spec.out)),
        ]);
        let hl = spec.groups;
        let results = J::Obj(vec![
            ("decision_dates", J::Int(d as i64)),
            ("excess_returns", J::Bool(table.rf.is_some())),
            ("hl_annualized_pct", J::Num(sorted.avg_annualized[hl])),
            ("hl_alpha_pct", J::Num(alpha_rows[hl].0)),
            ("hl_alpha_t", J::Num(alpha_rows[hl].1)),
        ]);
        tracker.finish("sort", config, J::Null, results, started)
    })
}

// ---------------------------------------------------------------------- fm

pub fn run_fm(spec: &FmSpec) -> Result<(), CliError> {
    let started = Instant::now();
    with_tracker(&spec.out, |tracker| {
        let panel = load_panel_csv(&spec.panel)?;
        let table = load_factor_csv(&spec.factors)?;
        align_times(&panel_time_labels(&panel), &table, &spec.factors)?;
        let returns = returns_matrix(&panel.y, table.rf.as_ref());
        let fm = esfm::asset_pricing::fama_macbeth(&returns, &table.values, &spec.label)
            .map_err(CliError::from_compute)?;

        let header: Vec<String> =
            ["specification", "term", "value"].iter().map(|s| s.to_string()).collect();
        let mut rows = vec![vec![
            fm.label.clone(),
            "intercept".to_string(),
            csv_float(fm.intercept),
        ]];
        for (j, premium) in fm.premia.iter().enumerate() {
            rows.push(vec![
                fm.label.clone(),
                format!("premium_{}", table.names[j]),
                csv_float(*premium),
            ]);
        }
        rows.push(vec![
            fm.label.clone(),
            "mean_adj_r2".to_string(),
            csv_float(fm.mean_adj_r2),
        ]);
        tracker.write("fm.csv", &render_csv(&header, &rows))?;

        let config = J::Obj(vec![
            ("panel", path_str(&spec.panel)),
            ("factors", path_str(&spec.factors)),
            ("label", J::Str(spec.label.clone())),
            ("out", path_str(&spec.out)),
        ]);
        let results = J::Obj(vec![
            ("intercept", J::Num(fm.intercept)),
            ("premia", J::Arr(fm.premia.iter().map(|v| J::Num(*v)).collect())),
            ("mean_adj_r2", J::Num(fm.mean_adj_r2)),
            ("excess_returns", J::Bool(table.rf.is_some())),
        ]);
        tracker.finish("fm", config, J::Null, results, started)
    })
}

// ---------------------------------------------------------------------- gc

pub fn run_gc(spec: &GcSpec) -> Result<(), CliError> {
    let started = Instant::now();
    with_tracker(&spec.out, |tracker| {
        let a = load_factor_csv(&spec.factors_a)?;
        let b = load_factor_csv(&spec.factors_b)?;
        if a.times != b.times {
            return Err(CliError::Validation(format!(
                "{} and {} cover different time sequences",
                spec.factors_a.display(),
                spec.factors_b.display()
            )));
        }
        let values =
            generalized_correlations(&a.values, &b.values).map_err(CliError::from_compute)?;

        let header: Vec<String> = ["index", "value"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<String>> = values
            .iter()
            .enumerate()
            .map(|(k, v)| vec![(k + 1).to_string(), csv_float(*v)])
            .collect();
        tracker.write("gc.csv", &render_csv(&header, &rows))?;

        let config = J::Obj(vec![
            ("factors_a", path_str(&spec.factors_a)),
            ("factors_b", path_str(&spec.factors_b)),
            ("out", path_str(&spec.out)),
        ]);
        let results = J::Obj(vec![
            ("count", J::Int(values.len() as i64)),
            ("values", J::Arr(values.iter().map(|v| J::Num(*v)).collect())),
        ]);
        tracker.finish("gc", config, J::Null, results, started)
    })
}
