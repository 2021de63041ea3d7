//! Command-line shell over the estimation library: input parsing, config
//! resolution, dispatch, and artifact emission.

pub mod commands;
pub mod config;
pub mod data_io;
pub mod errors;
pub mod json_out;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "esfm", version, about = "Two-stage tail-risk factor model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Fit both stages and emit coefficients, factors, loadings, and
    /// standard errors.
    Estimate(config::EstimateArgs),
    /// Tabulate the information criterion over candidate factor counts.
    SelectR(config::SelectRArgs),
    /// Run a Monte Carlo campaign and emit summary tables plus a
    /// deterministic JSON report.
    Simulate(config::SimulateArgs),
    /// Sort units on rolling first-factor exposures and test the spread.
    Sort(config::SortArgs),
    /// Two-pass cross-sectional premia on a returns panel.
    Fm(config::FmArgs),
    /// Generalized correlations between two factor files.
    Gc(config::GcArgs),
}

pub fn run(cli: Cli) -> Result<(), errors::CliError> {
    match cli.command {
        Command::Estimate(args) => commands::run_estimate(&config::resolve_estimate(args)?),
        Command::SelectR(args) => commands::run_select_r(&config::resolve_select_r(args)?),
        Command::Simulate(args) => commands::run_simulate(&config::resolve_simulate(args)?),
        Command::Sort(args) => commands::run_sort(&config::resolve_sort(args)?),
        Command::Fm(args) => commands::run_fm(&config::resolve_fm(args)?),
        Command::Gc(args) => commands::run_gc(&config::resolve_gc(args)?),
    }
}
