use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use faircert_core::io::{read_samples_file, read_stats_file};
use faircert_core::sensitive::certify_sensitive;
use faircert_core::stats::aggregate_stats;
use faircert_core::{Certificate, LossKind, SkewOptions};
use tempfile::TempDir;

fn faircert(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faircert"))
        .args(args)
        .current_dir(dir)
        .env_remove("FAIRCERT_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Losses with a few distinct values per cell.
fn loss_csv() -> String {
    let mut s = String::from("s,y,loss\n");
    for i in 0..200 {
        let (sv, y) = (i % 2, (i / 2) % 2);
        let loss = [0.0, 1.0, 0.0, 0.0, 1.0][(i * (sv + 2) + y) % 5];
        s.push_str(&format!("{sv},{y},{loss}\n"));
    }
    s
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn stats_writes_four_cells() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("s.csv"), loss_csv()).unwrap();
    let out = faircert(&["stats", "--samples", "s.csv", "--out", "o"], dir.path());
    ok(&out);
    let v = read_json(&dir.path().join("o/stats.json"));
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    let total: f64 = cells.iter().map(|c| c["p"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() <= 1e-12);
    assert_eq!(v["M"], 1.0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("S=2 C=2"));
}

#[test]
fn stats_reports_offending_line() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("s.csv"), "s,y,loss\n0,0,1\n0,1,0\n5,0,1\n").unwrap();
    let out = faircert(&["stats", "--samples", "s.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("s.csv:4"));
}

#[test]
fn stats_from_predictions_with_jsd() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::from("s,y,p0,p1\n");
    for s in 0..2 {
        for y in 0..2 {
            csv.push_str(&format!("{s},{y},0.5,0.5\n{s},{y},0.5,0.5\n"));
        }
    }
    fs::write(dir.path().join("p.csv"), csv).unwrap();
    ok(&faircert(&["stats", "--samples", "p.csv", "--loss", "jsd", "--out", "o"], dir.path()));
    let v = read_json(&dir.path().join("o/stats.json"));
    // JSD([0.5,0.5], [1,0]) in bits: m = (0.75, 0.25),
    // 0.5 KL(p||m) + 0.5 KL(e0||m) = 0.5 (0.5 log2(2/3) + 0.5 log2 2) + 0.5 log2(4/3)
    let expected = 0.5 * (0.5 * (2.0f64 / 3.0).log2() + 0.5) + 0.5 * (4.0f64 / 3.0).log2();
    for c in v["cells"].as_array().unwrap() {
        let e = c["E"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&e));
        assert!((e - expected).abs() <= 1e-12, "E = {e}, expected {expected}");
    }
}

fn skewed_stats(dir: &Path) {
    let json = r#"{"S":2,"C":2,"M":1.0,"cells":[
        {"s":0,"y":0,"n":850,"E":0.1,"V":0.05,"p":0.85},
        {"s":0,"y":1,"n":50,"E":0.3,"V":0.1,"p":0.05},
        {"s":1,"y":0,"n":20,"E":0.4,"V":0.1,"p":0.02},
        {"s":1,"y":1,"n":80,"E":0.2,"V":0.08,"p":0.08}]}"#;
    fs::write(dir.join("stats.json"), json).unwrap();
}

fn sweep_rows(path: &Path) -> Vec<(f64, Option<f64>)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().ok())
        })
        .collect()
}

#[test]
fn skewed_sweep_starts_infeasible_then_rises() {
    let dir = TempDir::new().unwrap();
    skewed_stats(dir.path());
    let out = faircert(
        &[
            "certify", "--stats", "stats.json", "--rho-start", "0.05", "--rho-stop", "0.5", "--rho-step", "0.05",
            "--out", "o",
        ],
        dir.path(),
    );
    ok(&out);
    let rows = sweep_rows(&dir.path().join("o/sweep.csv"));
    assert_eq!(rows.len(), 10);
    assert!(rows[0].1.is_none(), "smallest radius should be infeasible");
    let first = rows.iter().position(|r| r.1.is_some()).expect("some radius is feasible");
    assert!(rows[first..].iter().all(|r| r.1.is_some()));
    for w in rows[first..].windows(2) {
        assert!(w[1].1.unwrap() >= w[0].1.unwrap() - 1e-12);
    }
    let certs: Vec<Certificate> = serde_json::from_str(&fs::read_to_string(dir.path().join("o/certificates.json")).unwrap()).unwrap();
    assert_eq!(certs.len(), 10);
    assert!(certs[0].value.is_none() && !certs[0].feasible);
}

#[test]
fn general_at_unit_radius_reaches_m() {
    let dir = TempDir::new().unwrap();
    skewed_stats(dir.path());
    let out = faircert(
        &["certify", "--stats", "stats.json", "--scenario", "general", "--rho", "1.0", "--granularity", "50", "--out", "o"],
        dir.path(),
    );
    ok(&out);
    let rows = sweep_rows(&dir.path().join("o/sweep.csv"));
    let v = rows[0].1.unwrap();
    assert!((0.99..=1.0).contains(&v), "bound {v}");
}

#[test]
fn outputs_are_deterministic_across_runs_and_jobs() {
    let dir = TempDir::new().unwrap();
    skewed_stats(dir.path());
    let base = ["certify", "--stats", "stats.json", "--scenario", "general", "--rho", "0.2,0.3", "--granularity", "40"];
    let mut a: Vec<&str> = base.to_vec();
    a.extend(["--out", "a", "--jobs", "1"]);
    ok(&faircert(&a, dir.path()));
    let mut b: Vec<&str> = base.to_vec();
    b.extend(["--out", "b"]);
    let out = Command::new(env!("CARGO_BIN_EXE_faircert"))
        .args(&b)
        .current_dir(dir.path())
        .env("FAIRCERT_JOBS", "3")
        .output()
        .unwrap();
    ok(&out);
    for f in ["certificates.json", "sweep.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn stats_round_trip_matches_in_process_certificate() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("s.csv"), loss_csv()).unwrap();
    ok(&faircert(&["stats", "--samples", "s.csv", "--out", "o"], dir.path()));
    ok(&faircert(&["certify", "--stats", "o/stats.json", "--rho", "0.3", "--out", "o"], dir.path()));
    let certs: Vec<Certificate> = serde_json::from_str(&fs::read_to_string(dir.path().join("o/certificates.json")).unwrap()).unwrap();
    let samples = read_samples_file(&dir.path().join("s.csv"), 2, 2).unwrap();
    let table = aggregate_stats(&samples.records(), 2, 2, LossKind::ZeroOne).unwrap();
    assert_eq!(read_stats_file(&dir.path().join("o/stats.json")).unwrap(), table);
    let direct = certify_sensitive(&table, 0.3, SkewOptions::none()).unwrap();
    assert_eq!(certs[0].value, direct.value);
    assert_eq!(certs[0].k, direct.k);
}

#[test]
fn bce_general_needs_explicit_bound() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::from("s,y,p0,p1\n");
    for s in 0..2 {
        for y in 0..2 {
            csv.push_str(&format!("{s},{y},0.3,0.7\n{s},{y},0.6,0.4\n"));
        }
    }
    fs::write(dir.path().join("p.csv"), csv).unwrap();
    ok(&faircert(&["stats", "--samples", "p.csv", "--loss", "bce", "--out", "o"], dir.path()));
    let args = ["certify", "--stats", "o/stats.json", "--scenario", "general", "--rho", "0.3", "--granularity", "20"];
    let out = faircert(&args, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unbounded"));
    let mut with_m = args.to_vec();
    with_m.extend(["--M", "5", "--out", "o"]);
    ok(&faircert(&with_m, dir.path()));
    // the sensitive certifier accepts unbounded losses
    ok(&faircert(&["certify", "--stats", "o/stats.json", "--rho", "0.3", "--out", "o"], dir.path()));
}

#[test]
fn gen_with_zero_trials_writes_header_only() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("s.csv"), loss_csv()).unwrap();
    ok(&faircert(&["gen", "--samples", "s.csv", "--trials", "0", "--out", "o"], dir.path()));
    assert_eq!(fs::read_to_string(dir.path().join("o/trials.csv")).unwrap(), "seed,distance,loss\n");
    // general shifting needs losses on the transformed samples
    let out = faircert(&["gen", "--samples", "s.csv", "--scenario", "general", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

/// Constant loss within each cell, so trial losses carry no sampling noise
/// beyond count rounding.
fn constant_cell_csv() -> String {
    let mut s = String::from("s,y,loss\n");
    for (i, (&n, &loss)) in [600usize, 150, 250, 400].iter().zip(&[0.1, 0.6, 0.4, 0.2]).enumerate() {
        for _ in 0..n {
            s.push_str(&format!("{},{},{loss}\n", i / 2, i % 2));
        }
    }
    s
}

#[test]
fn end_to_end_validation_has_no_violation() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("s.csv"), constant_cell_csv()).unwrap();
    ok(&faircert(&["stats", "--samples", "s.csv", "--out", "o"], dir.path()));
    ok(&faircert(
        &["certify", "--stats", "o/stats.json", "--rho-start", "0.001", "--rho-stop", "1", "--rho-step", "0.001", "--out", "o"],
        dir.path(),
    ));
    ok(&faircert(&["gen", "--samples", "s.csv", "--trials", "500", "--seed", "7", "--out", "o"], dir.path()));
    ok(&faircert(&["validate", "--sweep", "o/sweep.csv", "--trials", "o/trials.csv", "--out", "o"], dir.path()));
    let r = read_json(&dir.path().join("o/report.json"));
    assert!(r["max_violation"].as_f64().unwrap() <= 0.0, "report {r}");
    assert_eq!(r["violations"], 0);
    assert_eq!(r.as_object().unwrap().len(), 3);

    // same seed, same bytes
    ok(&faircert(&["gen", "--samples", "s.csv", "--trials", "500", "--seed", "7", "--out", "p"], dir.path()));
    assert_eq!(fs::read(dir.path().join("o/trials.csv")).unwrap(), fs::read(dir.path().join("p/trials.csv")).unwrap());
}

#[test]
fn shuffled_trials_columns_are_rejected() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("sweep.csv"), "rho,bound,feasible\n0.5,0.9,true\n").unwrap();
    fs::write(dir.path().join("t.csv"), "loss,seed,distance\n0.2,1,0.3\n").unwrap();
    let out = faircert(&["validate", "--sweep", "sweep.csv", "--trials", "t.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
}

#[test]
fn plot_counts_elements() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("sweep.csv"), "rho,bound,feasible\n0.1,,false\n0.2,0.4,true\n0.3,0.5,true\n").unwrap();
    fs::write(dir.path().join("t.csv"), "seed,distance,loss\n1,0.15,0.3\n2,0.25,0.2\n3,0.3,0.45\n").unwrap();
    ok(&faircert(&["plot", "--sweep", "sweep.csv", "--out", "a"], dir.path()));
    let svg = fs::read_to_string(dir.path().join("a/plot.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert_eq!(svg.matches("<circle").count(), 0);
    ok(&faircert(&["plot", "--sweep", "sweep.csv", "--trials", "t.csv", "--out", "b"], dir.path()));
    let svg = fs::read_to_string(dir.path().join("b/plot.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 3);
    fs::write(dir.path().join("empty.csv"), "rho,bound,feasible\n").unwrap();
    assert_eq!(faircert(&["plot", "--sweep", "empty.csv"], dir.path()).status.code(), Some(3));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    skewed_stats(dir.path());
    fs::write(
        dir.path().join("run.cfg"),
        "# sweep settings\nstats = stats.json\nrho = 0.3,0.4\nout = from_cfg\nseed = 5\n",
    )
    .unwrap();
    ok(&faircert(&["certify", "--config", "run.cfg"], dir.path()));
    assert_eq!(sweep_rows(&dir.path().join("from_cfg/sweep.csv")).len(), 2);
    ok(&faircert(&["certify", "--config", "run.cfg", "--rho", "0.5", "--out", "flags"], dir.path()));
    let rows = sweep_rows(&dir.path().join("flags/sweep.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, 0.5);
    fs::write(dir.path().join("bad.cfg"), "rho 0.3\n").unwrap();
    assert_eq!(faircert(&["certify", "--config", "bad.cfg"], dir.path()).status.code(), Some(2));
}

#[test]
fn demo_pipeline_runs() {
    let dir = TempDir::new().unwrap();
    ok(&faircert(&["demo", "--n", "4000", "--seed", "2", "--out", "d"], dir.path()));
    ok(&faircert(&["stats", "--samples", "d/samples.csv", "--out", "d"], dir.path()));
    ok(&faircert(&["gen", "--samples", "d/samples.csv", "--scenario", "general", "--trials", "20", "--out", "d"], dir.path()));
    let trials = fs::read_to_string(dir.path().join("d/trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 21);
}

#[test]
fn invalid_radius_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    skewed_stats(dir.path());
    assert_eq!(faircert(&["certify", "--stats", "stats.json", "--rho", "1.5"], dir.path()).status.code(), Some(2));
    assert_eq!(faircert(&["certify", "--stats", "missing.json", "--rho", "0.5"], dir.path()).status.code(), Some(2));
}
