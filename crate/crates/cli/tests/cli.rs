use std::path::Path;
use std::process::{Command, Output};

use supcp::io::{read_tensor, write_matrix_csv, write_tensor, ModelDocument};
use supcp::simulation::generate_setting;
use supcp::Matrix;

fn supcp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supcp"))
        .args(args)
        .current_dir(dir)
        .env("SUPCP_JOBS", "1")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn dataset(dir: &Path) {
    let data = generate_setting(3, 4).unwrap();
    write_tensor(dir.join("x.mway"), &data.x).unwrap();
    write_matrix_csv(dir.join("y.csv"), &data.y, None).unwrap();
}

const FIT: &[&str] = &["fit", "--x", "x.mway", "--y", "y.csv", "--rank", "2", "--max-iters", "60", "--anneal", "5"];

#[test]
fn fit_is_deterministic_and_evaluate_matches() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    for out in ["a.json", "b.json"] {
        ok(&supcp(dir.path(), &[FIT, &["--seed", "7", "--out", out]].concat()));
    }
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.json")).unwrap());

    let doc = ModelDocument::read(dir.path().join("a.json")).unwrap();
    let final_ll = doc.fit.as_ref().unwrap().final_loglik;
    let printed = ok(&supcp(dir.path(), &["evaluate", "--model", "a.json", "--x", "x.mway", "--y", "y.csv"]));
    let ll: f64 = printed.trim().parse().unwrap();
    assert!((ll - final_ll).abs() <= 1e-10 * final_ll.abs());
}

#[test]
fn different_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    ok(&supcp(dir.path(), &[FIT, &["--seed", "1", "--out", "a.json"]].concat()));
    ok(&supcp(dir.path(), &[FIT, &["--seed", "2", "--out", "b.json"]].concat()));
    assert_ne!(
        std::fs::read(dir.path().join("a.json")).unwrap(),
        std::fs::read(dir.path().join("b.json")).unwrap()
    );
}

#[test]
fn construct_at_zero_covariates_returns_feature_means() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    ok(&supcp(dir.path(), &[FIT, &["--out", "m.json"]].concat()));
    let zeros = ["0"; 10].join(",");
    ok(&supcp(dir.path(), &["construct", "--model", "m.json", "--y-values", &zeros, "--out", "c.mway"]));
    let c = read_tensor(dir.path().join("c.mway")).unwrap();
    let x = read_tensor(dir.path().join("x.mway")).unwrap();
    assert_eq!(c.dims(), &[1, 10, 10]);
    let xm = x.sample_matrix();
    for (j, v) in c.values().iter().enumerate() {
        let mean = xm.column(j).mean();
        assert!((v - mean).abs() < 1e-12, "feature {j}: {v} vs {mean}");
    }

    let short = supcp(dir.path(), &["construct", "--model", "m.json", "--y-values", "1,2", "--out", "d.mway"]);
    assert_eq!(short.status.code(), Some(2));
}

#[test]
fn rank_select_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let out = ok(&supcp(
        dir.path(),
        &["rank-select", "--x", "x.mway", "--y", "y.csv", "--ranks", "1,2", "--max-iters", "40", "--anneal", "5",
          "--out", "r.json", "--csv", "r.csv"],
    ));
    let chosen: usize = out.split_whitespace().last().unwrap().parse().unwrap();
    assert!(chosen == 1 || chosen == 2);
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rank,test_loglik");
    assert_eq!(lines.len(), 3);
    assert!(std::fs::metadata(dir.path().join("r.json")).unwrap().len() > 0);
}

#[test]
fn simulate_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    ok(&supcp(dir.path(), &["simulate", "--scheme", "rank:3", "--seed", "5", "--out-prefix", "sim"]));
    let x = read_tensor(dir.path().join("sim.mway")).unwrap();
    assert_eq!(x.order(), 3);
    let y = supcp::io::read_matrix_csv(dir.path().join("sim_y.csv")).unwrap();
    assert_eq!(y.nrows(), x.dims()[0]);
    assert!(dir.path().join("sim_truth.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    assert_eq!(supcp(dir.path(), &["fit", "--x", "x.mway"]).status.code(), Some(1));
    assert_eq!(supcp(dir.path(), &["--help"]).status.code(), Some(0));

    let missing = supcp(dir.path(), &["fit", "--x", "nope.mway", "--y", "y.csv", "--rank", "2", "--out", "m.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.mway"));

    std::fs::write(dir.path().join("bad.csv"), "1,2\n3\n").unwrap();
    let bad = supcp(dir.path(), &["fit", "--x", "x.mway", "--y", "bad.csv", "--rank", "2", "--out", "m.json"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!dir.path().join("m.json").exists());

    let y = Matrix::zeros(7, 1);
    write_matrix_csv(dir.path().join("short.csv"), &y, None).unwrap();
    let mismatch = supcp(dir.path(), &["fit", "--x", "x.mway", "--y", "short.csv", "--rank", "2", "--out", "m.json"]);
    assert_eq!(mismatch.status.code(), Some(2));
}
