//! Report files. JSON mode writes `report.json`; CSV mode writes one file per
//! table. Both write `timings.json` separately so the report itself is
//! byte-identical across repeated runs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Format;
use crate::error::CliError;
use crate::run::{RunReport, Timings};

pub const EPSILON_TABLE_HEADER: [&str; 7] = [
    "epsilon",
    "next_epsilon",
    "y_distance",
    "z_distance",
    "combined_distance",
    "gradient_h2",
    "resolvent_phi",
];
pub const PICARD_HEADER: [&str; 4] = ["run", "iteration", "distance", "contraction_ratio"];
pub const AUDIT_HEADER: [&str; 5] = ["audit", "epsilon", "lhs", "rhs", "constant"];

fn write_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn csv_file(dir: &Path, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| write_err(&path, e))?;
    w.write_record(header).map_err(|e| write_err(&path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| write_err(&path, e))?;
    }
    w.flush().map_err(|e| write_err(&path, e))?;
    Ok(path)
}

pub fn epsilon_rows(report: &RunReport) -> Vec<Vec<String>> {
    report
        .epsilon_table
        .iter()
        .map(|r| {
            vec![
                num(r.epsilon),
                num(r.next_epsilon),
                num(r.y_distance),
                num(r.z_distance),
                num(r.combined_distance()),
                num(r.gradient_h2),
                num(r.resolvent_phi),
            ]
        })
        .collect()
}

pub fn picard_rows(report: &RunReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for run in &report.runs {
        let d = &run.diagnostics;
        for (k, dist) in d.iterate_distances.iter().enumerate() {
            let ratio = if k == 0 { String::new() } else { num(d.contraction_ratios[k - 1]) };
            rows.push(vec![run.label.clone(), (k + 1).to_string(), num(*dist), ratio]);
        }
    }
    rows
}

pub fn audit_rows(report: &RunReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let mut push = |name: &str, audits: &[mbsde::BoundAudit<f64>]| {
        for a in audits {
            rows.push(vec![
                name.to_string(),
                a.epsilon.map(num).unwrap_or_default(),
                num(a.lhs),
                num(a.rhs),
                num(a.constant),
            ]);
        }
    };
    if let Some(a) = &report.apriori {
        push("apriori", &a.audits);
    }
    if let Some(y) = &report.yosida {
        push("yosida_gradient", &y.gradient);
        push("yosida_resolvent_phi", &y.resolvent_phi);
        push("yosida_distance", &y.distance);
    }
    rows
}

fn run_rows(report: &RunReport) -> (Vec<String>, Vec<Vec<String>>) {
    let m = report.runs.first().map_or(0, |r| r.y0.len());
    let mut header: Vec<String> = ["label", "epsilon"].iter().map(|s| s.to_string()).collect();
    header.extend((0..m).map(|k| format!("y0_{k}")));
    header.extend(
        [
            "iterations",
            "converged",
            "equation_residual",
            "subdiff_residual",
            "phi_integrability",
            "y_s2",
            "z_h2",
            "u_h2",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let rows = report
        .runs
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone(), r.scheme.epsilon().map(num).unwrap_or_default()];
            row.extend(r.y0.iter().map(|v| num(*v)));
            row.extend([
                r.diagnostics.iterations_used.to_string(),
                r.diagnostics.converged.to_string(),
                num(r.residuals.equation),
                num(r.residuals.subdiff),
                num(r.residuals.phi_integrability),
                num(r.norms.y.s2),
                num(r.norms.z.h2),
                num(r.norms.u.h2),
            ]);
            row
        })
        .collect();
    (header, rows)
}

/// Writes the report and returns the files created.
pub fn emit(report: &RunReport, timings: &Timings, dir: &Path, format: Format) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
    let mut written = Vec::new();
    match format {
        Format::Json => {
            let path = dir.join("report.json");
            let text = serde_json::to_string_pretty(report).map_err(|e| write_err(&path, e))?;
            fs::write(&path, text + "\n").map_err(|e| write_err(&path, e))?;
            written.push(path);
        }
        Format::Csv => {
            written.push(csv_file(dir, "epsilon_table.csv", &EPSILON_TABLE_HEADER, &epsilon_rows(report))?);
            written.push(csv_file(dir, "picard_distances.csv", &PICARD_HEADER, &picard_rows(report))?);
            written.push(csv_file(dir, "audits.csv", &AUDIT_HEADER, &audit_rows(report))?);
            let (header, rows) = run_rows(report);
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            written.push(csv_file(dir, "runs.csv", &header, &rows)?);
            let path = dir.join("config.toml");
            fs::write(&path, &report.config).map_err(|e| write_err(&path, e))?;
            written.push(path);
        }
    }
    let path = dir.join("timings.json");
    let text = serde_json::to_string_pretty(timings).map_err(|e| write_err(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| write_err(&path, e))?;
    written.push(path);
    Ok(written)
}
