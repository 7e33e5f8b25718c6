use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use netgrowth::inference::{log_likelihood, ObservationSet};
use netgrowth::risk::psi_quantile;
use netgrowth::sim::run_monte_carlo;
use netgrowth::{DVector, ModelParams, NetWorthVector, SimConfig};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_netgrowth"));
    c.env_remove("NETGROWTH_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn netgrowth")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "netgrowth {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

/// Rows of a CSV without quoting, header dropped.
fn rows(path: &str) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

fn calibrated_3sector(dir: &TempDir) -> String {
    let out = p(dir, "params.json");
    run_ok(&[
        "calibrate",
        "--io-table",
        &fixture("io_3sector.csv"),
        "--growth",
        &fixture("growth_3sector.csv"),
        "-o",
        &out,
    ]);
    out
}

const SCALAR: &str = r#"{"n":1,"phi":[[0.0]],"lambda":[0.1],"a0":[100.0]}"#;

#[test]
fn calibrate_two_sector_matches_hand_computation() {
    let dir = TempDir::new().unwrap();
    let io = write(&dir, "io.csv", "label,x_1,x_2,output\nA,10,20,100\nB,30,40,200\n");
    let growth = write(&dir, "g.csv", "label,annual_growth\nA,0\nB,0.0365\n");
    let out = p(&dir, "params.json");
    run_ok(&["calibrate", "--io-table", &io, "--growth", &growth, "-o", &out]);

    let doc: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let phi = |i: usize, j: usize| doc["phi"][i][j].as_f64().unwrap();
    // c = [[0.1, 0.1], [0.3, 0.2]], phi = c / 365
    for (i, j, c) in [(0, 0, 0.1), (0, 1, 0.1), (1, 0, 0.3), (1, 1, 0.2)] {
        assert!((phi(i, j) - c / 365.0).abs() < 1e-18);
    }
    assert_eq!(doc["a0"], serde_json::json!([1.0, 2.0]));
    // lambda_i = (sum_j x_ij) / (365 X_i) - g_i / 365
    let lam = doc["lambda"].as_array().unwrap();
    assert!((lam[0].as_f64().unwrap() - 30.0 / 36_500.0).abs() < 1e-15);
    assert!((lam[1].as_f64().unwrap() - (70.0 / 73_000.0 - 0.0001)).abs() < 1e-15);
    assert_eq!(doc["labels"], serde_json::json!(["A", "B"]));

    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(format!("{out}.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "calibrate");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn calibrate_rerun_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let first = calibrated_3sector(&dir);
    let a = fs::read(&first).unwrap();
    run_ok(&[
        "calibrate",
        "--io-table",
        &fixture("io_3sector.csv"),
        "--growth",
        &fixture("growth_3sector.csv"),
        "-o",
        &first,
    ]);
    assert_eq!(a, fs::read(&first).unwrap());
}

#[test]
fn calibrate_missing_output_column_exits_2() {
    let dir = TempDir::new().unwrap();
    let io = write(&dir, "io.csv", "label,x_1,x_2\nA,10,20\nB,30,40\n");
    let growth = write(&dir, "g.csv", "label,annual_growth\nA,0\nB,0\n");
    let out = run(&[
        "calibrate",
        "--io-table",
        &io,
        "--growth",
        &growth,
        "-o",
        &p(&dir, "x.json"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("output"));
}

#[test]
fn calibrate_bad_number_reports_line() {
    let dir = TempDir::new().unwrap();
    let io = write(
        &dir,
        "io.csv",
        "label,x_1,x_2,output\nA,10,20,100\nB,30,oops,200\n",
    );
    let growth = write(&dir, "g.csv", "label,annual_growth\nA,0\nB,0\n");
    let out = run(&[
        "calibrate",
        "--io-table",
        &io,
        "--growth",
        &growth,
        "-o",
        &p(&dir, "x.json"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn moments_scalar_closed_form() {
    let dir = TempDir::new().unwrap();
    let params = write(&dir, "p.json", SCALAR);
    let out = p(&dir, "m.csv");
    run_ok(&[
        "moments", "--params", &params, "--t-max", "30", "--step", "1", "-o", &out,
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,mu1_1,mu2_11");
    let r = rows(&out);
    assert_eq!(r.len(), 31);
    let last = &r[30];
    assert_eq!(num(&last[0]), 30.0);
    assert!((num(&last[1]) - 100.0 * (-3.0f64).exp()).abs() < 1e-8 * 4.98);
    assert!((num(&last[1]) - 4.97871).abs() < 5e-6);
    let ten = &r[10];
    let want = 100.0 * ((-1.0f64).exp() - (-2.0f64).exp());
    assert!((num(&ten[2]) - want).abs() < 1e-8 * want);
}

#[test]
fn risk_zero_horizon_is_zero() {
    let dir = TempDir::new().unwrap();
    let params = calibrated_3sector(&dir);
    let out = p(&dir, "r.csv");
    run_ok(&[
        "risk", "--params", &params, "--source", "1", "--t-max", "0", "-o", &out,
    ]);
    let r = rows(&out);
    assert_eq!(r.len(), 3);
    for row in r {
        assert_eq!(num(&row[5]), 0.0);
    }
}

#[test]
fn risk_curves_grow_and_match_moments() {
    let dir = TempDir::new().unwrap();
    let params = calibrated_3sector(&dir);
    let r01 = p(&dir, "r01.csv");
    let r05 = p(&dir, "r05.csv");
    let mom = p(&dir, "m.csv");
    let ranking = p(&dir, "rank.csv");
    let src = "Transportation equipment";
    run_ok(&[
        "risk",
        "--params",
        &params,
        "--source",
        src,
        "--q",
        "0.01",
        "-o",
        &r01,
        "--ranking",
        &ranking,
    ]);
    run_ok(&[
        "risk", "--params", &params, "--source", src, "--q", "0.05", "-o", &r05,
    ]);
    run_ok(&["moments", "--params", &params, "-o", &mom]);

    let a = rows(&r01);
    let b = rows(&r05);
    let m = rows(&mom);
    assert_eq!(a.len(), 91 * 3);
    let ratio = psi_quantile(0.01).unwrap() / psi_quantile(0.05).unwrap();
    assert!((ratio - 1.414).abs() < 1e-3);
    for i in 0..3 {
        let mut prev = 0.0;
        for k in 0..91 {
            let row = &a[k * 3 + i];
            assert_eq!(num(&row[0]), k as f64);
            let r = num(&row[5]);
            assert!(r.abs() >= prev - 1e-14, "sector {i} at t = {k}");
            prev = r.abs();
            let mu1 = num(&m[k][1 + i]);
            assert!((r - (num(&row[4]) - mu1) / mu1).abs() < 1e-10);
            if k > 0 {
                assert!((r / num(&b[k * 3 + i][5]) - ratio).abs() < 1e-10);
            }
        }
    }
    let rank = rows(&ranking);
    assert_eq!(rank.len(), 3);
    assert_eq!(rank[0][2], "Mining");
}

#[test]
fn risk_source_by_label_or_index() {
    let dir = TempDir::new().unwrap();
    let params = calibrated_3sector(&dir);
    let by_label = p(&dir, "a.csv");
    let by_index = p(&dir, "b.csv");
    run_ok(&[
        "risk", "--params", &params, "--source", "Services", "--t-max", "5", "-o", &by_label,
    ]);
    run_ok(&[
        "risk", "--params", &params, "--source", "2", "--t-max", "5", "-o", &by_index,
    ]);
    assert_eq!(fs::read(by_label).unwrap(), fs::read(by_index).unwrap());

    let out = run(&[
        "risk",
        "--params",
        &params,
        "--source",
        "Agriculture",
        "-o",
        &p(&dir, "c.csv"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Mining") && err.contains("Transportation equipment") && err.contains("Services"));
}

#[test]
fn simulate_is_reproducible_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let params = calibrated_3sector(&dir);
    let mut payloads: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for (k, threads) in ["1", "1", "3"].iter().enumerate() {
        let out = p(&dir, &format!("e{k}.bin"));
        let status = bin()
            .env("NETGROWTH_THREADS", threads)
            .args([
                "simulate", "--params", &params, "--paths", "37", "--t-max", "3", "--seed", "9",
            ])
            .args(["-o", &out, "--binary"])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        payloads.push((
            fs::read(&out).unwrap(),
            fs::read(format!("{out}.moments.csv")).unwrap(),
        ));
    }
    assert!(payloads.windows(2).all(|w| w[0] == w[1]));

    let single = |name: &str| {
        let out = p(&dir, name);
        run_ok(&[
            "simulate", "--params", &params, "--paths", "1", "--t-max", "2", "-o", &out,
        ]);
        fs::read(out).unwrap()
    };
    assert_eq!(single("s1.csv"), single("s2.csv"));
}

#[test]
fn simulate_writes_empirical_moments() {
    let dir = TempDir::new().unwrap();
    let params = write(&dir, "p.json", SCALAR);
    let out = p(&dir, "e.csv");
    let mom = p(&dir, "em.csv");
    run_ok(&[
        "simulate",
        "--params",
        &params,
        "--paths",
        "4000",
        "--t-max",
        "2",
        "--record-step",
        "1",
        "-o",
        &out,
        "--moments",
        &mom,
    ]);
    assert_eq!(rows(&out).len(), 4000 * 3);
    let m = rows(&mom);
    assert_eq!(m.len(), 3);
    // mean 100 e^{-0.2}, variance 100 (e^{-0.2} - e^{-0.4}); SE of the mean is about 0.065
    let mean = num(&m[2][1]);
    assert!((mean - 100.0 * (-0.2f64).exp()).abs() < 0.3, "{mean}");
}

#[test]
fn fit_recovers_lambda() {
    let dir = TempDir::new().unwrap();
    let truth = ModelParams::from_rows(&[vec![0.0]], &[0.1]).unwrap();
    let a0 = NetWorthVector::initial(&[100.0]);
    let times: Vec<f64> = (1..=200).map(|d| d as f64 * 0.1).collect();
    let ens = run_monte_carlo(&truth, &a0, &SimConfig::new(0.01, 20.0, 200, 2024), &times).unwrap();
    let mut csv = String::from("t,a_1\n");
    let mut records = Vec::new();
    for (d, &t) in times.iter().enumerate() {
        let v = ens.value(d, d, 0);
        csv.push_str(&format!("{t},{v}\n"));
        records.push((t, DVector::from_element(1, v)));
    }
    let data = write(&dir, "obs.csv", &csv);
    let init = write(
        &dir,
        "init.json",
        r#"{"n":1,"phi":[[0.0]],"lambda":[0.3],"a0":[100.0]}"#,
    );
    let out = p(&dir, "fit.json");
    run_ok(&[
        "fit",
        "--params-init",
        &init,
        "--data",
        &data,
        "--free",
        "lambda",
        "-o",
        &out,
    ]);
    let doc: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let lam = doc["lambda"][0].as_f64().unwrap();
    assert!((0.08..=0.12).contains(&lam), "lambda-hat = {lam}");
    assert!(doc["fit_report"]["converged"].as_bool().unwrap());

    // Grid search over the same likelihood.
    let obs = ObservationSet::new(a0, records).unwrap();
    let (best, _) = (0..=2000)
        .map(|k| 0.05 + k as f64 * 0.00005)
        .map(|l| {
            let p = ModelParams::from_rows(&[vec![0.0]], &[l]).unwrap();
            (l, log_likelihood(&p, &obs).unwrap())
        })
        .fold(
            (0.0, f64::NEG_INFINITY),
            |acc, x| if x.1 > acc.1 { x } else { acc },
        );
    assert!((lam - best).abs() < 1e-4, "fit {lam}, grid {best}");
}

#[test]
fn numeric_failure_exits_3() {
    let dir = TempDir::new().unwrap();
    let params = write(
        &dir,
        "p.json",
        r#"{"n":1,"phi":[[1000.0]],"lambda":[0.0],"a0":[1.0]}"#,
    );
    let out = run(&[
        "moments",
        "--params",
        &params,
        "--t-max",
        "2",
        "-o",
        &p(&dir, "m.csv"),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let no_a0 = write(&dir, "p.json", r#"{"n":1,"phi":[[0.0]],"lambda":[0.1]}"#);
    let out = run(&["moments", "--params", &no_a0, "-o", &p(&dir, "m.csv")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("a0"));

    let bad = write(
        &dir,
        "bad.json",
        r#"{"n":1,"phi":[[0.0]],"lambda":[-0.1],"a0":[1.0]}"#,
    );
    assert_eq!(
        run(&["moments", "--params", &bad, "-o", &p(&dir, "m.csv")])
            .status
            .code(),
        Some(2)
    );

    let ok = write(&dir, "ok.json", SCALAR);
    let out = run(&[
        "moments",
        "--params",
        &ok,
        "--t-max",
        "2.5",
        "--step",
        "1",
        "-o",
        &p(&dir, "m.csv"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["moments", "--bogus"]).status.code(), Some(2));

    let out = bin()
        .env("NETGROWTH_THREADS", "zero")
        .args(["moments", "--params", &ok, "-o", &p(&dir, "m.csv")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn manifest_sits_next_to_output() {
    let dir = TempDir::new().unwrap();
    let params = write(&dir, "p.json", SCALAR);
    let out = p(&dir, "e.csv");
    run_ok(&[
        "simulate", "--params", &params, "--paths", "2", "--t-max", "1", "--seed", "5", "-o", &out,
    ]);
    let m: Value =
        serde_json::from_str(&fs::read_to_string(PathBuf::from(format!("{out}.manifest.json"))).unwrap())
            .unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["options"]["paths"], 2);
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert!(m["duration_seconds"].as_f64().unwrap() >= 0.0);
}
