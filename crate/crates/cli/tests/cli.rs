use std::path::Path;
use std::process::{Command, Output};

use hpim_cli::{cmd_run, cmd_sweep, sweep_csv, CliError, RunSpec, SweepGrid, SweepOutcome, CAPACITY_ERROR, SWEEP_COLUMNS};

fn hpim(args: &[&str], preset_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hpim"));
    cmd.args(args);
    match preset_dir {
        Some(d) => cmd.env("HPIM_PRESET_DIR", d),
        None => cmd.env_remove("HPIM_PRESET_DIR"),
    };
    cmd.output().unwrap()
}

fn one_stack_hw(dir: &Path) -> std::path::PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(hpim_core::presets::hardware("hpim-default").unwrap()).unwrap();
    v["name"] = "one-stack".into();
    v["n_stacks"] = 1.into();
    let p = dir.join("one-stack.json");
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

#[test]
fn run_writes_report_with_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let trace = dir.path().join("t.json");
    let csv = dir.path().join("b.csv");
    let out = hpim(
        &[
            "run", "--model", "opt-1.3b", "--in", "64", "--out", "4", "--baseline", "a100",
            "--report", report.to_str().unwrap(), "--trace", trace.to_str().unwrap(),
            "--csv", csv.to_str().unwrap(),
        ],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["model", "hw", "request", "phase_latencies_us", "breakdown", "utilization", "baseline", "speedup"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert!(r["speedup"].as_f64().unwrap() > 1.0);
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert!(t["traceEvents"].as_array().unwrap().iter().any(|e| e["ph"] == "X"));
    let csv = std::fs::read_to_string(&csv).unwrap();
    assert!(csv.starts_with("phase,op_class,critical_us,"));
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn prefill_only_run_prints_to_stdout() {
    let out = hpim(&["run", "--model", "opt-350m", "--in", "1", "--out", "0"], None);
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["phase_latencies_us"]["decode"].as_f64(), Some(0.0));
    assert!(r["phase_latencies_us"]["prefill"].as_f64().unwrap() > 0.0);
    assert!(r.get("baseline").is_none());
}

#[test]
fn malformed_hw_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"name\": \"x\",\n  \"n_cores\": -1\n}").unwrap();
    let out = hpim(&["run", "--model", "opt-350m", "--hw", bad.to_str().unwrap(), "--in", "8", "--out", "1"], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(" line ") && err.contains("`-1`"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn capacity_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let hw = one_stack_hw(dir.path());
    let out = hpim(&["run", "--model", "opt-30b", "--hw", hw.to_str().unwrap(), "--in", "8", "--out", "1"], None);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unwritable_output_exits_4() {
    let out = hpim(
        &["run", "--model", "opt-350m", "--in", "8", "--out", "1", "--report", "/nonexistent-dir/r.json"],
        None,
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bad_flags_exit_2() {
    assert_eq!(hpim(&["run", "--model", "opt-350m"], None).status.code(), Some(2));
    let out = hpim(&["sweep", "--model", "opt-350m", "--in", "1,2,3", "--out", "1,2"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn preset_dir_lookup() {
    let dir = tempfile::tempdir().unwrap();
    one_stack_hw(dir.path());
    let out = hpim(&["validate", "--hw", "one-stack"], Some(dir.path()));
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("hardware: one-stack"));
    assert!(text.contains("24.000 GiB"));
    assert!(!text.contains("PASS") && !text.contains("FAIL"));
    assert_eq!(hpim(&["validate", "--hw", "one-stack"], None).status.code(), Some(2));
}

#[test]
fn validate_default_passes() {
    let out = hpim(&["validate"], None);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("PASS").count(), 7);
    assert!(!text.contains("FAIL"));
    assert!(text.contains("65.536 TB/s") && text.contains("102.4"));
}

#[test]
fn sweep_grid_shape_and_order() {
    let grid = SweepGrid {
        models: vec!["opt-350m".into(), "opt-1.3b".into(), "opt-350m".into()],
        hw: "hpim-default".into(),
        lengths: vec![(16, 2), (8, 1), (16, 2)],
        baseline: Some("a100".into()),
        params: None,
    };
    let rows = cmd_sweep(&grid, Some(2)).unwrap();
    assert_eq!(rows.len(), 9);
    let order: Vec<_> = rows.iter().map(|r| (r.model.name.as_str(), r.len_in, r.len_out)).collect();
    assert_eq!(order[0], ("opt-350m", 16, 2));
    assert_eq!(order[1], ("opt-350m", 8, 1));
    assert_eq!(order[3], ("opt-1.3b", 16, 2));
    // Duplicate grid points give identical rows.
    assert_eq!(rows[0], rows[2]);
    assert_eq!(rows[0], rows[6]);
    let csv = sweep_csv(&rows).unwrap();
    assert_eq!(csv.lines().next().unwrap(), SWEEP_COLUMNS.join(","));
    assert_eq!(csv.lines().count(), 10);
    assert_eq!(csv, sweep_csv(&cmd_sweep(&grid, Some(1)).unwrap()).unwrap());
}

#[test]
fn sweep_marks_capacity_rows_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let hw = one_stack_hw(dir.path());
    let grid = SweepGrid {
        models: vec!["opt-350m".into(), "opt-30b".into()],
        hw: hw.to_str().unwrap().into(),
        lengths: vec![(8, 1)],
        baseline: None,
        params: None,
    };
    let rows = cmd_sweep(&grid, None).unwrap();
    assert!(matches!(rows[0].outcome, SweepOutcome::Done { .. }));
    assert!(matches!(rows[1].outcome, SweepOutcome::CapacityError(_)));
    let csv = sweep_csv(&rows).unwrap();
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("opt-30b,7168,48,56,8,1,"));
    assert_eq!(last.matches(CAPACITY_ERROR).count(), 5);
}

#[test]
fn empty_grid_rejected() {
    let grid = SweepGrid {
        models: vec![],
        hw: "hpim-default".into(),
        lengths: vec![(1, 1)],
        baseline: None,
        params: None,
    };
    assert!(matches!(cmd_sweep(&grid, None), Err(CliError::Parse(_))));
}

#[test]
fn params_override_changes_result() {
    let base = cmd_run(&RunSpec::new("opt-350m", "hpim-default", 32, 2)).unwrap();
    let slow = cmd_run(&RunSpec {
        params: Some(r#"{"vcu_passes": {"gelu": 64}}"#.into()),
        ..RunSpec::new("opt-350m", "hpim-default", 32, 2)
    })
    .unwrap();
    assert!(slow.report.total_cycles > base.report.total_cycles);
}
