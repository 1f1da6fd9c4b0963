//! Runs the `zimix` binary end to end.

use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

use zimix::io::{from_json, FitReport, Versioned};
use zimix::simulate::{builtin_design, generate_dataset};

fn zimix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zimix")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Simulated ZILoNM data with an extra unused column, written as CSV.
fn write_design_csv(dir: &Path, n: usize) -> String {
    let mut design = builtin_design("zilonm30").unwrap();
    design.n = n;
    let data = generate_dataset(&design, 0).unwrap();
    let mut text = String::from("id,treat,med,outcome\n");
    for (i, r) in data.records().iter().enumerate() {
        writeln!(text, "{i},{},{},{}", r.x, r.m_star, r.y).unwrap();
    }
    let path = dir.join("data.csv");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn fit_writes_a_versioned_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_design_csv(dir.path(), 300);
    let out = zimix(&[
        "fit", "--data", &csv, "--y", "outcome", "--m", "med", "--x", "treat", "--k-range", "1:2", "--starts", "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let report: Versioned<FitReport> = from_json(&text).unwrap();
    assert_eq!(report.schema, "zimix/1");
    assert_eq!(report.body.data.n, 300);
    assert!(report.body.selection.iter().all(|r| r.family == zimix::MediatorFamily::Zilonm));
    let est = |name: &str| {
        report
            .body
            .effects
            .effects
            .iter()
            .find(|e| e.effect.name() == name)
            .unwrap()
            .estimate
    };
    assert_eq!(est("NIE"), est("NIE1") + est("NIE2"));
    assert_eq!(est("TE"), est("NIE") + est("NDE"));
}

#[test]
fn fit_table_output_goes_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_design_csv(dir.path(), 200);
    let target = dir.path().join("fit.txt");
    let out = zimix(&[
        "fit", "--data", &csv, "--y", "outcome", "--m", "med", "--x", "treat", "--family", "zilonm", "--k-range", "1:1",
        "--starts", "1", "--format", "table", "--out", target.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let table = std::fs::read_to_string(target).unwrap();
    assert!(table.contains("NIE"), "{table}");
}

#[test]
fn invalid_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_design_csv(dir.path(), 100);
    let base = ["fit", "--data", &csv, "--y", "outcome", "--m", "med", "--x", "treat"];

    let out = zimix(&[&base[..], &["--k-range", "3:1"]].concat());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = zimix(&["fit", "--data", &csv, "--y", "nope", "--m", "med", "--x", "treat"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("'nope'"), "{}", stderr(&out));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x,m,y\n0,1,0.5\n1,-3,0.1\n").unwrap();
    let out = zimix(&["fit", "--data", bad.to_str().unwrap(), "--y", "y", "--m", "m", "--x", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("row 3"), "{}", stderr(&out));

    let out = zimix(&[&base[..], &["--family", "zipm"]].concat());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = zimix(&["simulate", "--design", "nosuchdesign"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_byte_identical_for_a_fixed_seed() {
    let args = [
        "simulate", "--design", "zipm30", "--n", "150", "--reps", "2", "--family", "zipm", "--k-range", "1:2",
        "--starts", "1", "--seed", "9",
    ];
    let a = zimix(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = zimix(&args);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.contains("\"schema\": \"zimix/1\""));
}

#[test]
fn unfittable_data_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.csv");
    let mut text = String::from("x,m,y\n");
    for i in 0..40 {
        writeln!(text, "0,{},1", i % 3).unwrap();
    }
    std::fs::write(&path, text).unwrap();
    let out = zimix(&["fit", "--data", path.to_str().unwrap(), "--y", "y", "--m", "m", "--x", "x", "--starts", "1"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
