//! CSV ingestion and emission.
//!
//! Panel files are long format with header `unit,time,y,x1,..,xp`; factor
//! files are wide with header `time,f1,..,fk` plus an optional trailing `rf`
//! column. Rows are canonicalized to (unit, time) order with a numeric-aware
//! label comparison, and panels must be exactly balanced.

use crate::errors::CliError;
use crate::json_out::float_repr;
use esfm::PanelData;
use nalgebra::{DMatrix, DVector};
use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// Observable factor series aligned to time labels.
#[derive(Debug, Clone)]
pub struct FactorTable {
    pub times: Vec<String>,
    /// Column names `f1..fk`.
    pub names: Vec<String>,
    /// `T x k` factor values.
    pub values: DMatrix<f64>,
    /// Risk-free column when the file carries one.
    pub rf: Option<DVector<f64>>,
}

/// Labels that parse as numbers sort numerically, before any non-numeric
/// label; everything else sorts lexicographically.
pub fn label_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Float cell format shared by every CSV: 17 significant digits.
pub fn csv_float(v: f64) -> String {
    if v.is_finite() {
        float_repr(v)
    } else if v.is_nan() {
        "NaN".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .split('\n')
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn parse_cell(
    field: &str,
    line_no: usize,
    column: &str,
    path: &Path,
) -> Result<f64, CliError> {
    field.trim().parse::<f64>().map_err(|_| {
        CliError::Validation(format!(
            "{}: line {line_no}: column '{column}' is not numeric: '{field}'",
            path.display()
        ))
    })
}

/// Loads a balanced long-format panel and synthesizes the intercept column.
pub fn load_panel_csv(path: &Path) -> Result<PanelData, CliError> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(CliError::Validation(format!("{}: empty file", path.display())));
    }
    let header: Vec<&str> = lines[0].split(',').map(str::trim).collect();
    if header.len() < 3 || header[0] != "unit" || header[1] != "time" || header[2] != "y" {
        return Err(CliError::Validation(format!(
            "{}: header must start with 'unit,time,y', found '{}'",
            path.display(),
            lines[0]
        )));
    }
    let p = header.len() - 3;
    for j in 0..p {
        let expect = format!("x{}", j + 1);
        if header[3 + j] != expect {
            return Err(CliError::Validation(format!(
                "{}: header column {} must be '{expect}', found '{}'",
                path.display(),
                4 + j,
                header[3 + j]
            )));
        }
    }

    // Cell map keyed by (unit, time) labels; duplicates are rejected.
    let mut cells: HashMap<(String, String), Vec<f64>> = HashMap::new();
    let mut units: Vec<String> = Vec::new();
    let mut times: Vec<String> = Vec::new();
    for (idx, line) in lines.iter().enumerate().skip(1) {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != p + 3 {
            return Err(CliError::Validation(format!(
                "{}: line {line_no}: expected {} fields, found {}",
                path.display(),
                p + 3,
                fields.len()
            )));
        }
        let unit = fields[0].trim().to_string();
        let time = fields[1].trim().to_string();
        let mut numbers = Vec::with_capacity(p + 1);
        numbers.push(parse_cell(fields[2], line_no, "y", path)?);
        for j in 0..p {
            numbers.push(parse_cell(fields[3 + j], line_no, &format!("x{}", j + 1), path)?);
        }
        if cells.insert((unit.clone(), time.clone()), numbers).is_some() {
            return Err(CliError::Validation(format!(
                "{}: line {line_no}: duplicate cell (unit '{unit}', time '{time}')",
                path.display()
            )));
        }
        units.push(unit);
        times.push(time);
    }

    units.sort_by(|a, b| label_cmp(a, b));
    units.dedup();
    times.sort_by(|a, b| label_cmp(a, b));
    times.dedup();
    if units.is_empty() {
        return Err(CliError::Validation(format!("{}: no data rows", path.display())));
    }
    for unit in &units {
        for time in &times {
            if !cells.contains_key(&(unit.clone(), time.clone())) {
                return Err(CliError::Validation(format!(
                    "{}: missing cell (unit '{unit}', time '{time}'): panel is unbalanced",
                    path.display()
                )));
            }
        }
    }

    let n = units.len();
    let t_len = times.len();
    let mut y = DMatrix::zeros(n, t_len);
    let mut x = Vec::with_capacity(n);
    for (i, unit) in units.iter().enumerate() {
        let mut x_i = DMatrix::from_element(t_len, p + 1, 1.0);
        for (t, time) in times.iter().enumerate() {
            let numbers = &cells[&(unit.clone(), time.clone())];
            y[(i, t)] = numbers[0];
            for j in 0..p {
                x_i[(t, j + 1)] = numbers[j + 1];
            }
        }
        x.push(x_i);
    }
    PanelData::new(y, x, Some(units), Some(times))
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Writes a panel back to the long format; labels default to row/column
/// indices when the panel carries none.
pub fn write_panel_csv(panel: &PanelData, path: &Path) -> Result<(), CliError> {
    let units = panel_unit_labels(panel);
    let times = panel_time_labels(panel);
    let mut out = String::from("unit,time,y");
    for j in 0..panel.p {
        let _ = write!(out, ",x{}", j + 1);
    }
    out.push('\n');
    for (i, unit) in units.iter().enumerate() {
        for (t, time) in times.iter().enumerate() {
            let _ = write!(out, "{unit},{time},{}", csv_float(panel.y[(i, t)]));
            for j in 0..panel.p {
                let _ = write!(out, ",{}", csv_float(panel.x[i][(t, j + 1)]));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn panel_unit_labels(panel: &PanelData) -> Vec<String> {
    panel
        .unit_labels
        .clone()
        .unwrap_or_else(|| (0..panel.n).map(|i| i.to_string()).collect())
}

pub fn panel_time_labels(panel: &PanelData) -> Vec<String> {
    panel
        .time_labels
        .clone()
        .unwrap_or_else(|| (0..panel.t_len).map(|t| t.to_string()).collect())
}

/// Loads a `time,f1..fk[,rf]` factor table, canonically ordered by time.
pub fn load_factor_csv(path: &Path) -> Result<FactorTable, CliError> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(CliError::Validation(format!("{}: empty file", path.display())));
    }
    let header: Vec<&str> = lines[0].split(',').map(str::trim).collect();
    if header.len() < 2 || header[0] != "time" {
        return Err(CliError::Validation(format!(
            "{}: header must be 'time,f1,..,fk' with an optional trailing 'rf', found '{}'",
            path.display(),
            lines[0]
        )));
    }
    let has_rf = *header.last().unwrap() == "rf";
    let k = header.len() - 1 - usize::from(has_rf);
    if k == 0 {
        return Err(CliError::Validation(format!(
            "{}: need at least one factor column",
            path.display()
        )));
    }
    for j in 0..k {
        let expect = format!("f{}", j + 1);
        if header[1 + j] != expect {
            return Err(CliError::Validation(format!(
                "{}: header column {} must be '{expect}', found '{}'",
                path.display(),
                2 + j,
                header[1 + j]
            )));
        }
    }

    let mut rows: Vec<(String, Vec<f64>)> = Vec::with_capacity(lines.len() - 1);
    for (idx, line) in lines.iter().enumerate().skip(1) {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(CliError::Validation(format!(
                "{}: line {line_no}: expected {} fields, found {}",
                path.display(),
                header.len(),
                fields.len()
            )));
        }
        let time = fields[0].trim().to_string();
        let mut numbers = Vec::with_capacity(header.len() - 1);
        for j in 1..header.len() {
            numbers.push(parse_cell(fields[j], line_no, header[j], path)?);
        }
        if rows.iter().any(|(t, _)| *t == time) {
            return Err(CliError::Validation(format!(
                "{}: line {line_no}: duplicate time '{time}'",
                path.display()
            )));
        }
        rows.push((time, numbers));
    }
    rows.sort_by(|a, b| label_cmp(&a.0, &b.0));

    let t_len = rows.len();
    let times: Vec<String> = rows.iter().map(|(t, _)| t.clone()).collect();
    let values = DMatrix::from_fn(t_len, k, |t, j| rows[t].1[j]);
    let rf = has_rf.then(|| DVector::from_fn(t_len, |t, _| rows[t].1[k]));
    let names = (0..k).map(|j| format!("f{}", j + 1)).collect();
    Ok(FactorTable { times, names, values, rf })
}

/// Requires the factor table to cover exactly the panel's periods, in the
/// same canonical order.
pub fn align_times(panel_times: &[String], table: &FactorTable, path: &Path) -> Result<(), CliError> {
    if panel_times.len() != table.times.len() {
        return Err(CliError::Validation(format!(
            "{}: factor file covers {} periods, panel has {}",
            path.display(),
            table.times.len(),
            panel_times.len()
        )));
    }
    for (a, b) in panel_times.iter().zip(table.times.iter()) {
        if a != b {
            return Err(CliError::Validation(format!(
                "{}: factor time '{b}' does not match panel time '{a}'",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Renders one CSV with the given header and prebuilt cell rows.
pub fn render_csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
