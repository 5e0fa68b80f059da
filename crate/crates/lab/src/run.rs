use std::path::Path;
use std::time::Instant;

use nsbohm::dynamics::{
    cdf_trajectory, equivariance_residual, integrate_guidance, invader_run, support_monitor,
    closeness_check, InvaderReport, Integrator, ClosenessReport, Trajectory, TrajectoryStatus,
};
use nsbohm::evolve::Potential;
use nsbohm::perturb::perturb;
use nsbohm::wavefield::{GradedWaveFunction, WaveFunction};
use nsbohm::Error;
use rayon::prelude::*;

use crate::config::{InitialState, Scenario, ScenarioKind};
use crate::output::{write_artifacts, write_metadata};
use crate::report::{
    Check, InvaderRow, NamedTrajectory, Relation, RunReport, RunResults, SweepTable, ClosenessRow,
};
use crate::LabError;

/// Cdf-tracked trajectories keep their level to the bisection tolerance.
pub const CDF_RESIDUAL_TOL: f64 = 1e-6;
/// Support monitor threshold on the standard density.
pub const SUPPORT_TOL: f64 = 1e-12;

pub fn status_label(s: &TrajectoryStatus) -> String {
    match s {
        TrajectoryStatus::Complete => "complete".into(),
        TrajectoryStatus::LeftGrid { t, x } => format!("left grid at t={t} x={x}"),
        TrajectoryStatus::Escaped { t, bound } => format!("escaped at t={t} beyond {bound}"),
        TrajectoryStatus::Node { t, x } => format!("node at t={t} x={x}"),
        TrajectoryStatus::SearchFailed { t, lo, hi } => format!("search failed at t={t} in [{lo}, {hi}]"),
    }
}

fn eps_name(e: f64) -> String {
    format!("eps_{e:e}")
}

fn integrator_name(i: Integrator) -> &'static str {
    match i {
        Integrator::Guidance => "guidance",
        Integrator::Cdf => "cdf",
    }
}

/// Core errors that stem from the config are reported against its keys.
fn config_error(e: Error) -> LabError {
    let key = match &e {
        Error::EnvelopeUnderflow { .. } => "perturbation.envelope_width",
        Error::FullSupport => "initial",
        Error::OutsideSupport { .. } => "x0",
        Error::InvalidGrid(_) => "grid",
        _ => return LabError::Core(e),
    };
    LabError::Config { key: key.into(), message: e.to_string() }
}

fn state_of(s: &Scenario, psi: &WaveFunction) -> Result<GradedWaveFunction, LabError> {
    match &s.perturbation {
        None => Ok(GradedWaveFunction::standard(psi.clone())),
        Some(p) => Ok(perturb(psi, &p.spec(), s.zero_tol()).map_err(config_error)?.state),
    }
}

/// Exact Bohmian trajectory of a free Gaussian:
/// `c + (ħk0/m)·t + (x0 − c)·σ(t)/σ0`.
fn free_gaussian_trajectory(s: &Scenario) -> Option<impl Fn(f64) -> f64> {
    match (s.initial.clone(), &s.potential, &s.perturbation) {
        (InitialState::Gaussian { center, sigma, k0 }, Potential::Free, None) => {
            let (m, hbar, x0) = (s.physics.mass, s.physics.hbar, s.x0);
            Some(move |t: f64| {
                let spread = (1.0 + (hbar * t / (2.0 * m * sigma * sigma)).powi(2)).sqrt();
                center + hbar * k0 / m * t + (x0 - center) * spread
            })
        }
        _ => None,
    }
}

fn max_gap(a: &Trajectory, b: &Trajectory) -> f64 {
    if a.times != b.times {
        return f64::NAN;
    }
    a.standard_positions()
        .iter()
        .zip(b.standard_positions())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn run_trajectories(s: &Scenario, state: &GradedWaveFunction) -> Result<(Vec<Check>, Vec<NamedTrajectory>), LabError> {
    let times = s.times();
    let (v, p, cfg) = (&s.potential, &s.physics, &s.dynamics);
    let tol = &s.tolerances;
    let mut checks = Vec::new();
    let mut named = Vec::new();
    for integrator in s.integrator_choice().integrators() {
        let name = integrator_name(integrator);
        let tr = match integrator {
            Integrator::Guidance => integrate_guidance(state, v, p, s.x0, &times, None, cfg)?,
            Integrator::Cdf => cdf_trajectory(state, v, p, s.x0, &times, None, cfg)?,
        };
        checks.push(Check::flag(format!("{name}_complete"), None, tr.is_complete()));
        let residual = equivariance_residual(state, v, p, &tr, cfg)?;
        let limit = match integrator {
            Integrator::Guidance => tol.equivariance,
            Integrator::Cdf => CDF_RESIDUAL_TOL,
        };
        checks.push(Check::new(format!("{name}_equivariance"), Some(6), residual, Relation::AtMost, limit));
        let support = support_monitor(state, v, p, &tr, SUPPORT_TOL, cfg)?;
        checks.push(Check::none(format!("{name}_support_violations"), None, support.violations.len()));
        if let Some(exact) = free_gaussian_trajectory(s) {
            let err = tr
                .times
                .iter()
                .zip(tr.standard_positions())
                .map(|(t, x)| (x - exact(*t)).abs())
                .fold(0.0, f64::max);
            checks.push(Check::new(format!("{name}_closed_form"), Some(3), err, Relation::AtMost, tol.closed_form));
        }
        named.push(NamedTrajectory { name: name.into(), trajectory: tr });
    }
    if named.len() == 2 {
        let gap = max_gap(&named[0].trajectory, &named[1].trajectory);
        checks.push(Check::new("integrator_agreement", Some(6), gap, Relation::AtMost, tol.agreement));
    }
    Ok((checks, named))
}

fn integrator_of(s: &Scenario) -> Integrator {
    s.integrator_choice().integrators()[0]
}

fn closeness(s: &Scenario, psi: &WaveFunction, eps_list: &[f64]) -> Result<ClosenessReport, LabError> {
    let spec = s.perturbation.as_ref().expect("validated").spec();
    closeness_check(psi, &spec, &s.potential, &s.physics, s.x0, &s.times(), eps_list, integrator_of(s), &s.dynamics)
        .map_err(config_error)
}

fn closeness_rows(r: &ClosenessReport) -> Vec<ClosenessRow> {
    r.rows
        .iter()
        .map(|row| ClosenessRow { eps: row.eps, distance: row.distance, status: status_label(&row.status) })
        .collect()
}

fn closeness_checks(s: &Scenario, rows: &[ClosenessRow]) -> Vec<Check> {
    let mut sorted: Vec<&ClosenessRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let monotone = sorted.windows(2).all(|w| match (w[0].distance, w[1].distance) {
        (Some(a), Some(b)) => b <= a,
        _ => false,
    }) && sorted.iter().all(|r| r.distance.is_some());
    let smallest = sorted.last().and_then(|r| r.distance).unwrap_or(f64::NAN);
    vec![
        Check::flag("closeness_monotone", Some(7), monotone),
        Check::new("closeness_smallest_eps_distance", Some(7), smallest, Relation::Below, s.tolerances.closeness),
    ]
}

fn invader(s: &Scenario, psi: &WaveFunction, eps_list: &[f64], reverse: Option<f64>) -> Result<InvaderReport, LabError> {
    let spec = s.perturbation.as_ref().expect("validated").spec();
    invader_run(psi, &spec, &s.physics, s.x0, s.time.t_end, s.time.samples, eps_list, reverse, &s.dynamics)
        .map_err(|e| match e {
            Error::InvalidArgument(m) if m.contains("x0") => LabError::Config { key: "x0".into(), message: m },
            e => config_error(e),
        })
}

fn invader_rows(r: &InvaderReport) -> Vec<InvaderRow> {
    r.runs
        .iter()
        .map(|run| InvaderRow {
            eps: run.eps,
            x_final: run.x_final,
            level: Some(run.level),
            conservation_error: Some(run.conservation_error),
            relative_conservation_error: Some(run.relative_conservation_error),
            status: status_label(&run.trajectory.status),
        })
        .collect()
}

fn invader_checks(s: &Scenario, rows: &[InvaderRow]) -> Vec<Check> {
    let mut sorted: Vec<&InvaderRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let increasing = sorted.windows(2).all(|w| match (w[0].x_final, w[1].x_final) {
        (Some(a), Some(b)) => b > a,
        _ => false,
    }) && sorted.iter().all(|r| r.x_final.is_some());
    let mut checks = vec![Check::flag("invader_strictly_increasing", Some(8), increasing)];
    if let Some(bound) = s.invader.exceed_bound {
        let last = sorted.last().and_then(|r| r.x_final).unwrap_or(f64::NAN);
        checks.push(Check::new("invader_exceeds_bound", Some(8), last, Relation::Above, bound));
    }
    let worst = rows
        .iter()
        .map(|r| r.conservation_error.unwrap_or(f64::NAN))
        .fold(0.0, |a: f64, b| if b.is_nan() { b } else { a.max(b) });
    checks.push(Check::new("invader_conservation", Some(8), worst, Relation::AtMost, s.tolerances.conservation));
    checks
}

fn invader_level_check(s: &Scenario, r: &InvaderReport) -> Check {
    let q = s.perturbation.as_ref().expect("validated").grade;
    let to_f64 = |e: nsbohm::Exponent| *e.numer() as f64 / *e.denom() as f64;
    let found = r.level_exponent().map(to_f64).unwrap_or(f64::NAN);
    Check::new("invader_level_exponent", Some(8), found, Relation::Equals, 2.0 * to_f64(q))
}

/// Runs a validated scenario without touching the filesystem.
pub fn execute(s: &Scenario) -> Result<RunResults, LabError> {
    s.validate()?;
    let psi = s.initial_wavefunction()?;
    let (checks, trajectories, sweep) = match s.kind {
        ScenarioKind::Trajectory => {
            let state = state_of(s, &psi)?;
            let (c, t) = run_trajectories(s, &state)?;
            (c, t, None)
        }
        ScenarioKind::Closeness => {
            let r = closeness(s, &psi, &s.eps_list)?;
            let rows = closeness_rows(&r);
            let mut named = vec![NamedTrajectory { name: "baseline".into(), trajectory: r.baseline.clone() }];
            named.extend(
                s.eps_list
                    .iter()
                    .zip(&r.perturbed)
                    .map(|(e, tr)| NamedTrajectory { name: eps_name(*e), trajectory: tr.clone() }),
            );
            (closeness_checks(s, &rows), named, Some(SweepTable::Closeness(rows)))
        }
        ScenarioKind::Invader => {
            let r = invader(s, &psi, &s.eps_list, s.invader.reverse_eps)?;
            let rows = invader_rows(&r);
            let mut checks = invader_checks(s, &rows);
            checks.push(invader_level_check(s, &r));
            let mut named: Vec<NamedTrajectory> = r
                .runs
                .iter()
                .map(|run| NamedTrajectory { name: eps_name(run.eps), trajectory: run.trajectory.clone() })
                .collect();
            if let Some(e) = s.invader.reverse_eps {
                let back = r.reverse.as_ref().and_then(|b| b.x_return).unwrap_or(f64::NAN);
                checks.push(Check::new(
                    "reverse_return_distance",
                    Some(9),
                    (back - s.x0).abs(),
                    Relation::AtMost,
                    s.tolerances.return_distance,
                ));
                if let Some(b) = &r.reverse {
                    named.push(NamedTrajectory { name: format!("reverse_{}", eps_name(e)), trajectory: b.trajectory.clone() });
                }
            }
            (checks, named, Some(SweepTable::Invader(rows)))
        }
    };
    Ok(RunResults { scenario: s.clone(), checks, trajectories, sweep, wavefunction: psi })
}

/// Runs every ε of the sweep as its own task; a failing ε becomes a row
/// with its error as status and the others continue.
pub fn execute_sweep(s: &Scenario) -> Result<RunResults, LabError> {
    s.validate()?;
    let psi = s.initial_wavefunction()?;
    match s.kind {
        ScenarioKind::Trajectory => Err(LabError::Config {
            key: "kind".into(),
            message: "sweeps need a closeness or invader scenario".into(),
        }),
        ScenarioKind::Closeness => {
            let runs: Vec<(ClosenessRow, Option<Trajectory>)> = s
                .eps_list
                .par_iter()
                .map(|e| match closeness(s, &psi, &[*e]) {
                    Ok(r) => (closeness_rows(&r).remove(0), r.perturbed.into_iter().next()),
                    Err(err) => (ClosenessRow { eps: *e, distance: None, status: format!("error: {err}") }, None),
                })
                .collect();
            let rows: Vec<ClosenessRow> = runs.iter().map(|r| r.0.clone()).collect();
            let named = runs
                .into_iter()
                .filter_map(|(row, tr)| tr.map(|t| NamedTrajectory { name: eps_name(row.eps), trajectory: t }))
                .collect();
            Ok(RunResults {
                scenario: s.clone(),
                checks: closeness_checks(s, &rows),
                trajectories: named,
                sweep: Some(SweepTable::Closeness(rows)),
                wavefunction: psi,
            })
        }
        ScenarioKind::Invader => {
            let runs: Vec<(InvaderRow, Option<Trajectory>)> = s
                .eps_list
                .par_iter()
                .map(|e| match invader(s, &psi, &[*e], None) {
                    Ok(r) => (invader_rows(&r).remove(0), r.runs.into_iter().next().map(|run| run.trajectory)),
                    Err(err) => (
                        InvaderRow {
                            eps: *e,
                            x_final: None,
                            level: None,
                            conservation_error: None,
                            relative_conservation_error: None,
                            status: format!("error: {err}"),
                        },
                        None,
                    ),
                })
                .collect();
            let rows: Vec<InvaderRow> = runs.iter().map(|r| r.0.clone()).collect();
            let named = runs
                .into_iter()
                .filter_map(|(row, tr)| tr.map(|t| NamedTrajectory { name: eps_name(row.eps), trajectory: t }))
                .collect();
            Ok(RunResults {
                scenario: s.clone(),
                checks: invader_checks(s, &rows),
                trajectories: named,
                sweep: Some(SweepTable::Invader(rows)),
                wavefunction: psi,
            })
        }
    }
}

fn finish(results: RunResults, out: &Path, started: Instant, label: &str) -> Result<RunReport, LabError> {
    let mut timings = vec![(label.to_string(), started.elapsed().as_secs_f64())];
    let write_start = Instant::now();
    let mut artifacts = write_artifacts(out, &results)?;
    timings.push(("write".into(), write_start.elapsed().as_secs_f64()));
    artifacts.push(write_metadata(out, &results, &timings)?);
    Ok(RunReport { results, artifacts, timings })
}

/// Loads, runs and writes a scenario. Outputs go to `out`, or to the
/// directory named by the scenario.
pub fn run_scenario(config_path: &Path, out: Option<&Path>) -> Result<RunReport, LabError> {
    let s = Scenario::from_path(config_path)?;
    run_loaded(&s, out)
}

pub fn run_loaded(s: &Scenario, out: Option<&Path>) -> Result<RunReport, LabError> {
    let started = Instant::now();
    let results = execute(s)?;
    finish(results, &out.map(Path::to_path_buf).unwrap_or_else(|| s.default_output_dir()), started, "run")
}

pub fn sweep_epsilon(config_path: &Path, out: Option<&Path>) -> Result<RunReport, LabError> {
    let s = Scenario::from_path(config_path)?;
    sweep_loaded(&s, out)
}

pub fn sweep_loaded(s: &Scenario, out: Option<&Path>) -> Result<RunReport, LabError> {
    let started = Instant::now();
    let results = execute_sweep(s)?;
    finish(results, &out.map(Path::to_path_buf).unwrap_or_else(|| s.default_output_dir()), started, "sweep")
}
