use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbcontrol"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn run_on(command: &str, name: &str, extra: &[&str], out: &Path) -> Output {
    let path = scenario(name);
    let mut args = vec![command, "--scenario", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args, out)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn check_exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        run_on("check", "zero.toml", &[], dir.path()).status.code(),
        Some(0)
    );
    let a = json(&dir.path().join("assumptions.json"));
    assert_eq!(a["gates_pass"], true);

    let huge = run_on("check", "l3_huge.toml", &[], dir.path());
    assert_eq!(huge.status.code(), Some(1));
    assert_eq!(
        json(&dir.path().join("assumptions.json"))["assumption3"]["pass"],
        false
    );

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "horizon = [").unwrap();
    let o = run(&["check", "--scenario", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("parse"));
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["exit_code"], 2);
    assert!(manifest["error"].is_string());

    let missing = run(&["check", "--scenario", "/nonexistent.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn manifest_hash_follows_the_scenario_bytes() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("zero.toml");
    let text = std::fs::read_to_string(scenario("zero.toml")).unwrap();
    let hash = |contents: &str| {
        std::fs::write(&file, contents).unwrap();
        let o = run(&["check", "--scenario", file.to_str().unwrap()], dir.path());
        assert_eq!(o.status.code(), Some(0));
        json(&dir.path().join("manifest.json"))["scenario_sha256"]
            .as_str()
            .unwrap()
            .to_string()
    };
    let a = hash(&text);
    assert_eq!(a, hash(&text));
    assert_ne!(a, hash(&format!("{text}\n# comment\n")));
}

#[test]
fn cfl_violation_reports_the_required_step() {
    let dir = TempDir::new().unwrap();
    let o = run_on("solve", "cfl.toml", &[], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(
        err.contains("stage hjb") && err.contains("required dt"),
        "{err}"
    );
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["exit_code"], 3);
    let stages: Vec<&str> = manifest["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["stage"].as_str().unwrap())
        .collect();
    assert_eq!(stages, ["assumptions", "hjb"]);
}

#[test]
fn gates_block_solve_unless_forced() {
    let dir = TempDir::new().unwrap();
    let o = run_on("solve", "l3_huge.toml", &[], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("value_field.csv").exists());
}

#[test]
fn unit_cost_export_adds_the_remaining_time() {
    let dir = TempDir::new().unwrap();
    let o = run_on("solve", "g_one.toml", &[], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("value_field.csv")).unwrap();
    let horizon = 1.0;
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let (t, x, w) = (v[0], v[1], v[2]);
        // φ(x) = x²/2
        assert!(
            (w - (0.5 * x * x + horizon - t)).abs() < 1e-12,
            "t = {t}, x = {x}, W = {w}"
        );
        rows += 1;
    }
    assert!(rows > 1000);
    for name in ["trajectories.csv", "adjoint.csv", "manifest.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let manifest = json(&dir.path().join("manifest.json"));
    let stages = manifest["stages"].as_array().unwrap();
    let names: Vec<&str> = stages
        .iter()
        .map(|s| s["stage"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "assumptions",
            "hjb",
            "simulate",
            "first_adjoint",
            "second_adjoint",
            "export"
        ]
    );
    for w in stages.windows(2) {
        let end = w[0]["started"].as_f64().unwrap() + w[0]["seconds"].as_f64().unwrap();
        assert!(w[1]["started"].as_f64().unwrap() >= end);
    }
}

#[test]
fn singleton_mp_global_passes() {
    let dir = TempDir::new().unwrap();
    let o = run_on(
        "verify",
        "singleton.toml",
        &["--relations", "MP_GLOBAL"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let reports = json(&dir.path().join("relations.json"));
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0]["relation"], "MP_GLOBAL");
    assert_eq!(reports[0]["passed"], true);
    let table = std::fs::read_to_string(dir.path().join("relations.txt")).unwrap();
    assert!(table.starts_with("relation") && table.contains("MP_GLOBAL"));
    let csv = std::fs::read_to_string(dir.path().join("relations.csv")).unwrap();
    assert!(csv.starts_with("relation,quantity,rule,statistic,threshold,passed\nMP_GLOBAL,"));

    let report = run(&["report"], dir.path());
    assert_eq!(report.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&report.stdout).contains("MP_GLOBAL"));
}

#[test]
fn injected_wrong_adjoint_fails_smooth_pq() {
    let dir = TempDir::new().unwrap();
    let solve = run_on("solve", "singleton.toml", &[], dir.path());
    assert_eq!(solve.status.code(), Some(0), "{}", stderr(&solve));
    let reuse = ["--relations", "SMOOTH_PQ", "--reuse"];
    let clean = run_on("verify", "singleton.toml", &reuse, dir.path());
    assert_eq!(
        clean.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&clean.stdout)
    );

    let path = dir.path().join("adjoint.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let mut wrong = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let mut cols: Vec<String> = line.split(',').map(str::to_string).collect();
        let p: f64 = cols[2].parse().unwrap();
        cols[2] = (p + 0.5).to_string();
        wrong.push_str(&cols.join(","));
        wrong.push('\n');
    }
    std::fs::write(&path, wrong).unwrap();
    let o = run_on("verify", "singleton.toml", &reuse, dir.path());
    assert_eq!(o.status.code(), Some(1));
    let reports = json(&dir.path().join("relations.json"));
    assert_eq!(reports[0]["relation"], "SMOOTH_PQ");
    assert_eq!(reports[0]["passed"], false);
    assert_eq!(run(&["report"], dir.path()).status.code(), Some(1));
}

#[test]
fn verify_input_errors() {
    let dir = TempDir::new().unwrap();
    let o = run_on("verify", "singleton.toml", &["--reuse"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing artifact"));
    let o = run_on(
        "verify",
        "singleton.toml",
        &["--relations", "NOT_A_RELATION"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        run(&["report"], &dir.path().join("empty")).status.code(),
        Some(2)
    );
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn outputs_do_not_depend_on_the_thread_count() {
    let dirs: Vec<TempDir> = ["1", "3"]
        .iter()
        .map(|threads| {
            let dir = TempDir::new().unwrap();
            let o = run_on(
                "verify",
                "singleton.toml",
                &["--threads", threads, "--seed", "11"],
                dir.path(),
            );
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
            dir
        })
        .collect();
    for name in [
        "assumptions.json",
        "value_field.csv",
        "trajectories.csv",
        "adjoint.csv",
        "relations.json",
        "relations.csv",
        "relations.txt",
    ] {
        let read = |d: &TempDir| std::fs::read(d.path().join(name)).unwrap();
        assert_eq!(read(&dirs[0]), read(&dirs[1]), "{name}");
    }
    let seeds = json(&dirs[0].path().join("manifest.json"))["seeds"]["montecarlo"].clone();
    assert_eq!(seeds, 11);
}
