//! CSV and JSON artifacts of a run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nsbohm::dynamics::{Position, Trajectory};
use nsbohm::wavefield::WaveFunction;
use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::report::{Check, RunResults, SweepTable};
use crate::LabError;

pub const RESULTS_FILE: &str = "results.json";
pub const METADATA_FILE: &str = "metadata.json";

/// Shortest text that reads back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), LabError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))?;
    Ok(())
}

pub fn checks_csv(checks: &[Check]) -> Result<String, LabError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["check", "criterion", "value", "relation", "tolerance", "passed"])?;
    for c in checks {
        w.write_record([
            c.name.clone(),
            c.criterion.map(|k| k.to_string()).unwrap_or_default(),
            fmt_f64(c.value),
            c.relation.symbol().to_string(),
            fmt_f64(c.tolerance),
            c.passed.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Pool(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn trajectory_rows(tr: &Trajectory) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let graded = tr.positions.iter().any(|p| matches!(p, Position::Graded(_)));
    if !graded {
        let rows = tr
            .times
            .iter()
            .zip(&tr.positions)
            .map(|(t, x)| vec![fmt_f64(*t), fmt_f64(x.standard())])
            .collect();
        return (vec!["t", "x"], rows);
    }
    let rows = tr
        .times
        .iter()
        .zip(&tr.positions)
        .map(|(t, x)| {
            let (coef, exp) = match x {
                Position::Real(v) => (fmt_f64(*v), "0".to_string()),
                Position::Graded(h) => match h.leading() {
                    Some((e, c)) => (fmt_f64(c), e.to_string()),
                    None => ("0.0".to_string(), String::new()),
                },
            };
            vec![fmt_f64(*t), coef, exp, fmt_f64(x.standard())]
        })
        .collect();
    (vec!["t", "x_leading_coefficient", "x_leading_exponent", "x_standard"], rows)
}

fn wavefunction_rows(wf: &WaveFunction) -> Vec<Vec<String>> {
    let g = wf.grid();
    wf.samples()
        .iter()
        .enumerate()
        .map(|(j, s)| vec![fmt_f64(g.x(j)), fmt_f64(s.re), fmt_f64(s.im), fmt_f64(s.norm_sqr())])
        .collect()
}

/// Writes the CSV files and `results.json`; returns the paths written.
pub fn write_artifacts(dir: &Path, results: &RunResults) -> Result<Vec<PathBuf>, LabError> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut written = Vec::new();

    let path = dir.join("checks.csv");
    fs::write(&path, checks_csv(&results.checks)?).map_err(|e| LabError::io(&path, e))?;
    written.push(path);

    let path = dir.join("wavefunction.csv");
    write_rows(&path, &["x", "re", "im", "density"], wavefunction_rows(&results.wavefunction))?;
    written.push(path);

    for nt in &results.trajectories {
        let path = dir.join(format!("trajectory_{}.csv", nt.name));
        let (header, rows) = trajectory_rows(&nt.trajectory);
        write_rows(&path, &header, rows)?;
        written.push(path);
    }

    if let Some(table) = &results.sweep {
        let path = dir.join("sweep.csv");
        match table {
            SweepTable::Closeness(rows) => write_rows(
                &path,
                &["eps", "distance", "status"],
                rows.iter()
                    .map(|r| vec![fmt_f64(r.eps), fmt_opt(r.distance), r.status.clone()]),
            )?,
            SweepTable::Invader(rows) => write_rows(
                &path,
                &["eps", "x_final", "level", "conservation_error", "relative_conservation_error", "status"],
                rows.iter().map(|r| {
                    vec![
                        fmt_f64(r.eps),
                        fmt_opt(r.x_final),
                        fmt_opt(r.level),
                        fmt_opt(r.conservation_error),
                        fmt_opt(r.relative_conservation_error),
                        r.status.clone(),
                    ]
                }),
            )?,
        }
        written.push(path);
    }

    let path = dir.join(RESULTS_FILE);
    fs::write(&path, serde_json::to_vec(results)?).map_err(|e| LabError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub created_unix: u64,
    pub scenario: Scenario,
    pub timings: Vec<(String, f64)>,
    pub passed: bool,
}

pub fn write_metadata(dir: &Path, results: &RunResults, timings: &[(String, f64)]) -> Result<PathBuf, LabError> {
    let meta = Metadata {
        tool: "nsbohm".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        scenario: results.scenario.clone(),
        timings: timings.to_vec(),
        passed: results.passed(),
    };
    let path = dir.join(METADATA_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| LabError::io(&path, e))?;
    Ok(path)
}

pub fn read_results(run_dir: &Path) -> Result<RunResults, LabError> {
    let path = run_dir.join(RESULTS_FILE);
    let bytes = fs::read(&path).map_err(|e| LabError::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Re-emits the CSV files of a run directory from its `results.json`,
/// into `out` (the run directory itself by default).
pub fn export(run_dir: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>, LabError> {
    let results = read_results(run_dir)?;
    let mut paths = write_artifacts(out.unwrap_or(run_dir), &results)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    Ok(paths)
}
