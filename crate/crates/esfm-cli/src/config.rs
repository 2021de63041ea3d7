//! Flag and config-file resolution.
//!
//! Every subcommand accepts `--config FILE` pointing at a JSON object whose
//! keys mirror the flag names; explicit flags override file values, and
//! unknown keys are rejected. Required settings missing from both sources are
//! validation errors.

use crate::errors::CliError;
use clap::Args;
use esfm::{FitOptions, QrOptions, RPolicy, ScenarioConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use std::path::{Path, PathBuf};

pub const WORKERS_ENV: &str = "ESFM_WORKERS";

fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn require<T>(value: Option<T>, name: &str) -> Result<T, CliError> {
    value.ok_or_else(|| {
        CliError::Validation(format!("missing required setting '{name}' (flag or config file)"))
    })
}

/// Solver knobs shared by `estimate` and `select-r`.
fn fit_options(max_iterations: Option<usize>, tolerance: Option<f64>) -> FitOptions {
    let mut opts = FitOptions::default();
    if let Some(m) = max_iterations {
        opts.max_iterations = m;
    }
    if let Some(t) = tolerance {
        opts.tolerance = t;
    }
    opts
}

/// Worker-count precedence: environment variable, then flag, then config
/// file, then the machine's available parallelism.
pub fn resolve_workers(flag: Option<usize>, file: Option<usize>) -> Result<usize, CliError> {
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        let parsed: usize = raw.trim().parse().map_err(|_| {
            CliError::Validation(format!("{WORKERS_ENV} must be a positive integer, got '{raw}'"))
        })?;
        if parsed == 0 {
            return Err(CliError::Validation(format!("{WORKERS_ENV} must be positive")));
        }
        return Ok(parsed);
    }
    if let Some(w) = flag.or(file) {
        if w == 0 {
            return Err(CliError::Validation("worker count must be positive".into()));
        }
        return Ok(w);
    }
    Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

// ---------------------------------------------------------------- estimate

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// JSON config file supplying defaults for any flag below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Long-format panel CSV (unit,time,y,x1..xp).
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Tail level in (0, 0.5].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Number of latent factors.
    #[arg(long)]
    pub r: Option<usize>,
    /// Cap on alternating iterations.
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Relative objective-change tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Bartlett truncation lag; defaults to the T-based rule.
    #[arg(long)]
    pub lags: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateFile {
    pub panel: Option<PathBuf>,
    pub tau: Option<f64>,
    pub r: Option<usize>,
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
    pub lags: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct EstimateSpec {
    pub panel: PathBuf,
    pub tau: f64,
    pub r: usize,
    pub fit: FitOptions,
    pub qr: QrOptions,
    pub lags: Option<usize>,
    pub out: PathBuf,
}

pub fn resolve_estimate(args: EstimateArgs) -> Result<EstimateSpec, CliError> {
    let file: EstimateFile = load_file(args.config.as_deref())?;
    Ok(EstimateSpec {
        panel: require(args.panel.or(file.panel), "panel")?,
        tau: require(args.tau.or(file.tau), "tau")?,
        r: require(args.r.or(file.r), "r")?,
        fit: fit_options(
            args.max_iterations.or(file.max_iterations),
            args.tolerance.or(file.tolerance),
        ),
        qr: QrOptions::default(),
        lags: args.lags.or(file.lags),
        out: require(args.out.or(file.out), "out")?,
    })
}

// ---------------------------------------------------------------- select-r

#[derive(Debug, Args)]
pub struct SelectRArgs {
    /// JSON config file supplying defaults for any flag below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Long-format panel CSV (unit,time,y,x1..xp).
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Tail level in (0, 0.5].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Largest candidate factor count.
    #[arg(long)]
    pub r_max: Option<usize>,
    /// Cap on alternating iterations.
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Relative objective-change tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectRFile {
    pub panel: Option<PathBuf>,
    pub tau: Option<f64>,
    pub r_max: Option<usize>,
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct SelectRSpec {
    pub panel: PathBuf,
    pub tau: f64,
    pub r_max: usize,
    pub fit: FitOptions,
    pub qr: QrOptions,
    pub out: PathBuf,
}

pub fn resolve_select_r(args: SelectRArgs) -> Result<SelectRSpec, CliError> {
    let file: SelectRFile = load_file(args.config.as_deref())?;
    Ok(SelectRSpec {
        panel: require(args.panel.or(file.panel), "panel")?,
        tau: require(args.tau.or(file.tau), "tau")?,
        r_max: require(args.r_max.or(file.r_max), "r_max")?,
        fit: fit_options(
            args.max_iterations.or(file.max_iterations),
            args.tolerance.or(file.tolerance),
        ),
        qr: QrOptions::default(),
        out: require(args.out.or(file.out), "out")?,
    })
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON config file supplying defaults for any flag below plus the
    /// extended design knobs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Design variant, 1 through 7.
    #[arg(long)]
    pub scenario: Option<usize>,
    /// Cross-section size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Series length.
    #[arg(long)]
    pub t: Option<usize>,
    /// Tail level in (0, 0.5].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Master seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of replications.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Fix the factor count; mutually exclusive with --r-max.
    #[arg(long)]
    pub r: Option<usize>,
    /// Select the factor count per replication up to this cap; mutually
    /// exclusive with --r.
    #[arg(long)]
    pub r_max: Option<usize>,
    /// Worker threads (env ESFM_WORKERS overrides).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Extended design knobs are file-only: they rarely change and keeping them
/// out of the flag surface keeps --help readable.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub scenario: Option<usize>,
    pub n: Option<usize>,
    pub t: Option<usize>,
    pub tau: Option<f64>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub r: Option<usize>,
    pub r_max: Option<usize>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub p: Option<usize>,
    pub r0: Option<usize>,
    pub t_dof: Option<f64>,
    pub ar_coeff: Option<f64>,
    pub c_sigma: Option<f64>,
    pub sigma_lo: Option<f64>,
    pub sigma_hi: Option<f64>,
    pub group_count: Option<usize>,
    pub group_shift: Option<f64>,
    pub endog_weight: Option<f64>,
    pub jump_prob: Option<f64>,
    pub jump_scale: Option<f64>,
    pub asym_prob: Option<f64>,
    pub asym_rate: Option<f64>,
}

#[derive(Debug)]
pub struct SimulateSpec {
    pub cfg: ScenarioConfig,
    pub reps: usize,
    pub policy: RPolicy,
    pub workers: usize,
    pub out: PathBuf,
}

pub fn resolve_simulate(args: SimulateArgs) -> Result<SimulateSpec, CliError> {
    let file: SimulateFile = load_file(args.config.as_deref())?;
    let scenario = require(args.scenario.or(file.scenario), "scenario")?;
    let n = require(args.n.or(file.n), "n")?;
    let t = require(args.t.or(file.t), "t")?;
    let tau = require(args.tau.or(file.tau), "tau")?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let mut cfg =
        ScenarioConfig::new(scenario, n, t, tau, seed).map_err(CliError::from_compute)?;
    if let Some(v) = file.p {
        cfg.p = v;
    }
    if let Some(v) = file.r0 {
        cfg.r0 = v;
    }
    if let Some(v) = file.t_dof {
        cfg.t_dof = v;
    }
    if let Some(v) = file.ar_coeff {
        cfg.ar_coeff = v;
    }
    if let Some(v) = file.c_sigma {
        cfg.c_sigma = v;
    }
    if let Some(v) = file.sigma_lo {
        cfg.sigma_bounds.0 = v;
    }
    if let Some(v) = file.sigma_hi {
        cfg.sigma_bounds.1 = v;
    }
    if let Some(v) = file.group_count {
        cfg.group_count = v;
    }
    if let Some(v) = file.group_shift {
        cfg.group_shift = v;
    }
    if let Some(v) = file.endog_weight {
        cfg.endog_weight = v;
    }
    if let Some(v) = file.jump_prob {
        cfg.jump_prob = v;
    }
    if let Some(v) = file.jump_scale {
        cfg.jump_scale = v;
    }
    if let Some(v) = file.asym_prob {
        cfg.asym_prob = v;
    }
    if let Some(v) = file.asym_rate {
        cfg.asym_rate = v;
    }
    cfg.validate().map_err(CliError::from_compute)?;

    let fixed = args.r.or(file.r);
    let selected = args.r_max.or(file.r_max);
    let policy = match (fixed, selected) {
        (Some(_), Some(_)) => {
            return Err(CliError::Validation(
                "settings 'r' and 'r_max' are mutually exclusive".into(),
            ))
        }
        (Some(r), None) => RPolicy::Fixed(r),
        (None, Some(r_max)) => RPolicy::ICSelected { r_max },
        (None, None) => RPolicy::Fixed(cfg.r0),
    };
    Ok(SimulateSpec {
        cfg,
        reps: require(args.reps.or(file.reps), "reps")?,
        policy,
        workers: resolve_workers(args.workers, file.workers)?,
        out: require(args.out.or(file.out), "out")?,
    })
}

// -------------------------------------------------------------------- sort

#[derive(Debug, Args)]
pub struct SortArgs {
    /// JSON config file supplying defaults for any flag below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Long-format panel CSV of returns (unit,time,y).
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Factor CSV (time,f1..fk[,rf]); sorting uses f1, alphas control for
    /// all columns.
    #[arg(long)]
    pub factors: Option<PathBuf>,
    /// Rolling estimation window in periods (default 60).
    #[arg(long)]
    pub window: Option<usize>,
    /// Number of sort portfolios (default 5).
    #[arg(long)]
    pub groups: Option<usize>,
    /// Newey-West truncation lag for alphas (default 6).
    #[arg(long)]
    pub lags: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SortFile {
    pub panel: Option<PathBuf>,
    pub factors: Option<PathBuf>,
    pub window: Option<usize>,
    pub groups: Option<usize>,
    pub lags: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct SortSpec {
    pub panel: PathBuf,
    pub factors: PathBuf,
    pub window: usize,
    pub groups: usize,
    pub lags: usize,
    pub out: PathBuf,
}

pub fn resolve_sort(args: SortArgs) -> Result<SortSpec, CliError> {
    let file: SortFile = load_file(args.config.as_deref())?;
    Ok(SortSpec {
        panel: require(args.panel.or(file.panel), "panel")?,
        factors: require(args.factors.or(file.factors), "factors")?,
        window: args.window.or(file.window).unwrap_or(60),
        groups: args.groups.or(file.groups).unwrap_or(5),
        lags: args.lags.or(file.lags).unwrap_or(6),
        out: require(args.out.or(file.out), "out")?,
    })
}

// ---------------------------------------------------------------------- fm

#[derive(Debug, Args)]
pub struct FmArgs {
    /// JSON config file supplying defaults for any flag below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Long-format panel CSV of returns (unit,time,y).
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Factor CSV (time,f1..fk[,rf]).
    #[arg(long)]
    pub factors: Option<PathBuf>,
    /// Specification label echoed in the output table (default "model").
    #[arg(long)]
    pub label: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmFile {
    pub panel: Option<PathBuf>,
    pub factors: Option<PathBuf>,
    pub label: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct FmSpec {
    pub panel: PathBuf,
    pub factors: PathBuf,
    pub label: String,
    pub out: PathBuf,
}

pub fn resolve_fm(args: FmArgs) -> Result<FmSpec, CliError> {
    let file: FmFile = load_file(args.config.as_deref())?;
    Ok(FmSpec {
        panel: require(args.panel.or(file.panel), "panel")?,
        factors: require(args.factors.or(file.factors), "factors")?,
        label: args.label.or(file.label).unwrap_or_else(|| "model".to_string()),
        out: require(args.out.or(file.out), "out")?,
    })
}

// ---------------------------------------------------------------------- gc

#[derive(Debug, Args)]
pub struct GcArgs {
    /// JSON config file supplying defaults for any flag below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// First factor CSV (time,f1..fk[,rf]).
    #[arg(long)]
    pub factors_a: Option<PathBuf>,
    /// Second factor CSV over the same periods.
    #[arg(long)]
    pub factors_b: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcFile {
    pub factors_a: Option<PathBuf>,
    pub factors_b: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct GcSpec {
    pub factors_a: PathBuf,
    pub factors_b: PathBuf,
    pub out: PathBuf,
}

pub fn resolve_gc(args: GcArgs) -> Result<GcSpec, CliError> {
    let file: GcFile = load_file(args.config.as_deref())?;
    Ok(GcSpec {
        factors_a: require(args.factors_a.or(file.factors_a), "factors_a")?,
        factors_b: require(args.factors_b.or(file.factors_b), "factors_b")?,
        out: require(args.out.or(file.out), "out")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn bare_estimate_args() -> EstimateArgs {
        EstimateArgs {
            config: None,
            panel: None,
            tau: None,
            r: None,
            max_iterations: None,
            tolerance: None,
            lags: None,
            out: None,
        }
    }

    fn bare_simulate_args() -> SimulateArgs {
        SimulateArgs {
            config: None,
            scenario: None,
            n: None,
            t: None,
            tau: None,
            seed: None,
            reps: None,
            r: None,
            r_max: None,
            workers: None,
            out: None,
        }
    }

    #[test]
    fn flags_override_file_values() {
        let file = write_temp(
            r#"{"panel": "from_file.csv", "tau": 0.05, "r": 1, "out": "dir"}"#,
        );
        let mut args = bare_estimate_args();
        args.config = Some(file.path().to_path_buf());
        args.tau = Some(0.10);
        let spec = resolve_estimate(args).unwrap();
        assert_eq!(spec.tau, 0.10);
        assert_eq!(spec.r, 1);
        assert_eq!(spec.panel, PathBuf::from("from_file.csv"));
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let file = write_temp(r#"{"panel": "a.csv", "typo_key": 3}"#);
        let mut args = bare_estimate_args();
        args.config = Some(file.path().to_path_buf());
        let err = resolve_estimate(args).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("typo_key"), "{err}");
    }

    #[test]
    fn missing_required_setting_is_named() {
        let mut args = bare_estimate_args();
        args.panel = Some("p.csv".into());
        args.tau = Some(0.1);
        args.r = Some(2);
        let err = resolve_estimate(args).unwrap_err();
        assert!(err.to_string().contains("'out'"), "{err}");
    }

    #[test]
    fn simulate_policy_resolution() {
        let mut args = bare_simulate_args();
        args.scenario = Some(1);
        args.n = Some(10);
        args.t = Some(30);
        args.tau = Some(0.1);
        args.reps = Some(2);
        args.out = Some("dir".into());

        let spec = resolve_simulate(SimulateArgs { r: Some(3), ..args }).unwrap();
        assert_eq!(spec.policy, RPolicy::Fixed(3));
        assert_eq!(spec.cfg.seed, 0);

        let mut args = bare_simulate_args();
        args.scenario = Some(1);
        args.n = Some(10);
        args.t = Some(30);
        args.tau = Some(0.1);
        args.reps = Some(2);
        args.out = Some("dir".into());
        let spec = resolve_simulate(SimulateArgs { r_max: Some(4), ..args }).unwrap();
        assert_eq!(spec.policy, RPolicy::ICSelected { r_max: 4 });

        let mut args = bare_simulate_args();
        args.scenario = Some(1);
        args.n = Some(10);
        args.t = Some(30);
        args.tau = Some(0.1);
        args.reps = Some(2);
        args.out = Some("dir".into());
        args.r = Some(2);
        args.r_max = Some(4);
        let err = resolve_simulate(args).unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"), "{err}");

        // Neither flag: fixed at the design's true factor count.
        let mut args = bare_simulate_args();
        args.scenario = Some(1);
        args.n = Some(10);
        args.t = Some(30);
        args.tau = Some(0.1);
        args.reps = Some(2);
        args.out = Some("dir".into());
        let spec = resolve_simulate(args).unwrap();
        assert_eq!(spec.policy, RPolicy::Fixed(2));
    }

    #[test]
    fn simulate_file_overrides_design_knobs() {
        let file = write_temp(
            r#"{"scenario": 1, "n": 12, "t": 40, "tau": 0.1, "reps": 3,
                "out": "dir", "t_dof": 30.0, "c_sigma": 2.5, "sigma_lo": 0.05,
                "sigma_hi": 50.0, "r0": 1}"#,
        );
        let mut args = bare_simulate_args();
        args.config = Some(file.path().to_path_buf());
        let spec = resolve_simulate(args).unwrap();
        assert_eq!(spec.cfg.t_dof, 30.0);
        assert_eq!(spec.cfg.c_sigma, 2.5);
        assert_eq!(spec.cfg.sigma_bounds, (0.05, 50.0));
        assert_eq!(spec.policy, RPolicy::Fixed(1));
    }

    #[test]
    fn worker_precedence_without_env() {
        if std::env::var(WORKERS_ENV).is_ok() {
            return;
        }
        assert_eq!(resolve_workers(Some(3), Some(7)).unwrap(), 3);
        assert_eq!(resolve_workers(None, Some(7)).unwrap(), 7);
        assert!(resolve_workers(None, None).unwrap() >= 1);
        assert!(resolve_workers(Some(0), None).is_err());
    }
}
