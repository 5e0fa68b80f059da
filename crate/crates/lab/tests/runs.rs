use std::fs;
use std::path::Path;
use std::process::Command;

use nsbohm_lab::output::export;
use nsbohm_lab::report::SweepTable;
use nsbohm_lab::run::sweep_loaded;
use nsbohm_lab::{presets, run_scenario, sweep_epsilon, verify_all, with_workers, LabError, VerifyOptions};

fn write_preset(dir: &Path, name: &str, edit: impl Fn(&str) -> String) -> std::path::PathBuf {
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, edit(presets::source(name).unwrap())).unwrap();
    path
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_preset(tmp.path(), "free_gaussian", str::to_string);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = run_scenario(&cfg, Some(&a)).unwrap();
    run_scenario(&cfg, Some(&b)).unwrap();
    assert!(ra.passed());
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    assert!(fa.len() >= 4, "{fa:?}");
    assert_eq!(fa, fb);
    assert!(a.join("metadata.json").exists());
}

#[test]
fn export_reproduces_the_csv_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_preset(tmp.path(), "harmonic", str::to_string);
    let run = tmp.path().join("run");
    run_scenario(&cfg, Some(&run)).unwrap();
    let out = tmp.path().join("exported");
    let written = export(&run, Some(&out)).unwrap();
    assert_eq!(written.len(), csv_files(&run).len());
    assert_eq!(csv_files(&run), csv_files(&out));
}

#[test]
fn malformed_config_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_preset(tmp.path(), "free_gaussian", |s| s.replace("x_min = -40.0", "x_min = 50.0"));
    let out = tmp.path().join("out");
    match run_scenario(&cfg, Some(&out)) {
        Err(LabError::Config { key, .. }) => assert_eq!(key, "grid.x_min"),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(!out.exists());
}

#[test]
fn single_eps_sweep_has_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_preset(tmp.path(), "closeness", |s| s.replace("eps_list = [1e-2, 1e-3, 1e-4]", "eps_list = [1e-3]"));
    let out = tmp.path().join("out");
    let r = sweep_epsilon(&cfg, Some(&out)).unwrap();
    match r.results.sweep {
        Some(SweepTable::Closeness(rows)) => {
            assert_eq!(rows.len(), 1);
            assert_eq!(rows[0].eps, 1e-3);
            assert!(rows[0].distance.unwrap() < 1e-3);
        }
        other => panic!("{other:?}"),
    }
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn sweep_does_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let s = presets::load("closeness_harmonic").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    with_workers(1, || sweep_loaded(&s, Some(&a))).unwrap().unwrap();
    with_workers(3, || sweep_loaded(&s, Some(&b))).unwrap().unwrap();
    assert_eq!(csv_files(&a), csv_files(&b));
}

#[test]
fn sweeping_a_trajectory_scenario_is_refused() {
    let s = presets::load("free_gaussian").unwrap();
    assert!(matches!(sweep_loaded(&s, None), Err(LabError::Config { .. })));
}

#[test]
fn reversed_velocities_fail_equivariance() {
    let mut opts = VerifyOptions { only: Some(vec![6]), ..Default::default() };
    opts.dynamics.velocity_scale = -1.0;
    let r = verify_all(&opts).unwrap();
    assert!(!r.passed());
    assert!(r.criteria[0].checks.iter().any(|c| !c.passed && c.name.contains("equivariance")));
}

#[test]
fn empty_selection_is_reported() {
    let opts = VerifyOptions { only: Some(vec![]), ..Default::default() };
    let e = verify_all(&opts).unwrap_err();
    assert_eq!(e.to_string(), "nothing to verify");
    assert_eq!(e.exit_code(), 2);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_nsbohm")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_preset(tmp.path(), "free_gaussian", |s| s.replace("n = 4096", "n = 4"));
    let o = cli(&["run", bad.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.n"));

    let o = cli(&["verify", "--only", "1,4", "--workers", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 2);
    assert!(stdout.lines().all(|l| l.contains("PASS")));

    let o = cli(&["presets"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), presets::names().len());

    let o = cli(&["run", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
