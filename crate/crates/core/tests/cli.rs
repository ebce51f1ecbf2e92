//! The binary end to end on small configs: output layout, exit codes,
//! reruns and failure cleanup.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn small_config() -> Value {
    json!({
        "name": "small",
        "params": { "rho": 0.05, "A": 0.1, "phi": 0.5, "sigma_ab": 1.0, "alpha": 0.05, "chi": 1.0,
                    "epsilon": 2.0, "beta": 0.5, "delta": 0.1, "xi": 1.0, "eta": 0.0,
                    "lambda0": 0.05, "lambda1": 0.02, "sigma_P": 0.0, "variant": "NHPP" },
        "grid": { "K_lo": 0.1, "K_hi": 10, "N_K": 32, "P_lo": 0.1, "P_hi": 10, "N_P": 24 },
        "simulation": { "n_paths": 64, "T": 20, "dt": 0.0625, "master_seed": 5 },
        "verify": { "suboptimal_paths": 32, "martingale_paths": 64, "martingale_horizon": 10,
                    "transversality_paths": 16, "dpp_paths": 64 },
        "sweep": { "param": "lambda1", "values": [0.0, 0.02] }
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path, outdir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disaster-growth"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--outdir")
        .arg(outdir)
        .output()
        .unwrap()
}

/// The single run directory under `outdir`, from the last stdout line.
fn run_dir(out: &Output) -> PathBuf {
    let text = String::from_utf8_lossy(&out.stdout);
    PathBuf::from(text.lines().last().expect("run directory on stdout").trim())
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        if e.file_type().unwrap().is_dir() {
            names.extend(listing(&e.path()).into_iter().map(|n| format!("{name}/{n}")));
        } else {
            names.push(name);
        }
    }
    names.sort();
    names
}

#[test]
fn solve_writes_stamped_fields_and_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("out");
    let first = run(&["solve"], &cfg, &out);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let dir = run_dir(&first);
    assert!(dir.file_name().unwrap().to_string_lossy().starts_with("small-"));
    assert_eq!(listing(&dir), ["convergence.json", "policy.csv", "value.csv"]);
    let value = fs::read_to_string(dir.join("value.csv")).unwrap();
    assert!(value.starts_with("# config_hash="), "{}", &value[..40]);
    assert!(value.lines().next().unwrap().ends_with("master_seed=5"));
    let conv: Value = serde_json::from_str(&fs::read_to_string(dir.join("convergence.json")).unwrap()).unwrap();
    assert_eq!(conv["master_seed"], 5);
    assert!(conv["config_hash"].as_str().unwrap().len() == 64);

    let before: Vec<Vec<u8>> = listing(&dir).iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    let second = run(&["solve", "--threads", "3"], &cfg, &out);
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(run_dir(&second), dir);
    let after: Vec<Vec<u8>> = listing(&dir).iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    assert_eq!(before, after);
    // nothing but the run directory is left in the output directory
    assert_eq!(fs::read_dir(&out).unwrap().count(), 1);
}

#[test]
fn simulate_writes_probe_estimates_and_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let res = run(&["simulate", "--seed", "9"], &cfg, &tmp.path().join("out"));
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let dir = run_dir(&res);
    let files = listing(&dir);
    for f in ["convergence.json", "policy.csv", "summary.json", "value.csv", "paths/path_0000.csv", "paths/path_0003.csv"] {
        assert!(files.contains(&f.to_string()), "{f} missing from {files:?}");
    }
    assert_eq!(files.iter().filter(|f| f.starts_with("paths/")).count(), 4);
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["master_seed"], 9);
    assert_eq!(summary["probes"].as_array().unwrap().len(), 5);
    let path = fs::read_to_string(dir.join("paths/path_0000.csv")).unwrap();
    let mut lines = path.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "t,K,P,C,theta,jump_flag,mark");
    // T / dt + 1 rows
    assert_eq!(lines.count(), 321);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let res = run(&["sweep"], &cfg, &tmp.path().join("out"));
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(run_dir(&res).join("sweep.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 2 + 2);
    assert!(rows[1].starts_with("lambda1,iterations,interior_residual,v(K="));
    assert!(rows[2].starts_with("0,") && rows[3].starts_with("0.02,"));
    // a higher hazard slope lowers the value at every probe
    let v = |r: &str| r.split(',').skip(3).map(|x| x.parse::<f64>().unwrap()).collect::<Vec<_>>();
    assert!(v(rows[2]).iter().zip(v(rows[3])).all(|(a, b)| b < *a));
}

#[test]
fn verify_writes_a_report_and_signals_failed_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    let path = write_config(tmp.path(), &cfg);
    let res = run(&["verify"], &path, &tmp.path().join("ok"));
    let dir = run_dir(&res);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(res.status.code(), Some(if report["passed"].as_bool().unwrap() { 0 } else { 1 }));
    assert!(fs::read_to_string(dir.join("report.csv")).unwrap().lines().nth(1).unwrap() == "name,statistic,tolerance,passed,anchor");

    // an impossible transversality tolerance fails a check but the report is still written
    cfg["verify"]["transversality_tol"] = json!(1e-300);
    let path = write_config(tmp.path(), &cfg);
    let res = run(&["verify"], &path, &tmp.path().join("strict"));
    let report: Value = serde_json::from_str(&fs::read_to_string(run_dir(&res).join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn bad_configs_exit_2_and_leave_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cases = [
        json!({ "name": "x" }),
        {
            let mut c = small_config();
            c["params"]["surprise"] = json!(1.0);
            c
        },
        {
            let mut c = small_config();
            c["params"]["epsilon"] = json!(1.0);
            c
        },
        {
            let mut c = small_config();
            c["simulation"]["dt"] = json!(0.3);
            c
        },
    ];
    for cfg in &cases {
        let path = write_config(tmp.path(), cfg);
        let res = run(&["solve"], &path, &out);
        assert_eq!(res.status.code(), Some(2), "{cfg}: {}", String::from_utf8_lossy(&res.stderr));
        assert!(!out.exists(), "{cfg} left {:?}", listing(&out));
    }
    let path = write_config(tmp.path(), &small_config());
    assert_eq!(run(&["solve", "--threads", "0"], &path, &out).status.code(), Some(2));
    let missing = run(&["solve"], &tmp.path().join("nope.json"), &out);
    assert_eq!(missing.status.code(), Some(2));
    let mut no_sweep = small_config();
    no_sweep.as_object_mut().unwrap().remove("sweep");
    assert_eq!(run(&["sweep"], &write_config(tmp.path(), &no_sweep), &out).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn solver_failures_exit_3_and_io_failures_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = small_config();
    cfg["scheme"] = json!({ "max_iters": 1, "init": "UTILITY" });
    let res = run(&["solve"], &write_config(tmp.path(), &cfg), &out);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(!out.exists());

    // the output directory sits below a regular file
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let res = run(&["solve"], &write_config(tmp.path(), &small_config()), &blocker.join("out"));
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
}
