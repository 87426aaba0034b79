//! End-to-end runs of the `dedp` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn dedp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dedp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One value with three events of rate `a` each, so the total exceeds one
/// whenever the action is above a third.
const OVERFLOWING: &str = r#"{"kind":"custom","model":{
  "components":[{"name":"x","domain_max":3}],
  "events":[
    {"name":"up","delta":[1],"coeff_index":0,"factors":[{"component":0,"kind":"constant","params":[1.0]}]},
    {"name":"down","delta":[-1],"coeff_index":0,"factors":[{"component":0,"kind":"indicator","params":[1.0]}]},
    {"name":"stay","delta":[0],"coeff_index":0,"factors":[{"component":0,"kind":"constant","params":[1.0]}]}],
  "action_map":{"kind":"identity","params":{"dim":1}},
  "reward":{"components":[{"coef":1.0,"offset":0.0,"windows":[]}]},
  "gamma":0.9,"clock":{"steps_per_day":4},"initial":[1]}}"#;

#[test]
fn scenario_validate_reports_the_synthtown_size() {
    let v = stdout_json(&dedp(&[
        "scenario",
        "validate",
        "--config",
        path(&configs().join("synthtown.json")),
    ]));
    // 25 locations plus the clock.
    assert_eq!(v["num_components"], 26);
    assert_eq!(v["num_actions"], 25);
    assert!(v["worst_case_rate_bound"].as_f64().unwrap() <= 1.0);
    let via_run = stdout_json(&dedp(&[
        "scenario",
        "validate",
        "--config",
        path(&configs().join("synthtown_benchmark.json")),
    ]));
    assert_eq!(v, via_run);
}

#[test]
fn evaluate_and_oracle_agree_on_the_chain() {
    let chain = configs().join("commute_chain.json");
    let args = |cmd: &'static str| {
        vec![
            cmd,
            "--config",
            path(&chain),
            "--horizon",
            "20",
            "--seed",
            "3",
        ]
    };
    let ev = stdout_json(&dedp(&args("evaluate")));
    for key in ["elbo", "exp_elbo", "iterations", "residual"] {
        assert!(ev.get(key).is_some(), "missing {key}");
    }
    let exp_elbo = ev["exp_elbo"].as_f64().unwrap();
    let or = stdout_json(&dedp(&args("oracle")));
    let exact = or["value"].as_f64().unwrap();
    assert_eq!(or["num_states"], 6);
    assert!(
        (exp_elbo - exact).abs() <= 0.05 * exact,
        "{exp_elbo} vs {exact}"
    );
}

#[test]
fn simulate_prints_a_conserving_trajectory() {
    let out = dedp(&[
        "simulate",
        "--config",
        path(&configs().join("commute_chain.json")),
        "--horizon",
        "30",
        "--seed",
        "9",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..4], ["t", "clock", "event", "reward"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 31);
    for r in &rows {
        assert_eq!(
            r.iter()
                .skip(4)
                .map(|x| x.parse::<u32>().unwrap())
                .sum::<u32>(),
            2
        );
    }
    let again = dedp(&[
        "simulate",
        "--config",
        path(&configs().join("commute_chain.json")),
        "--horizon",
        "30",
        "--seed",
        "9",
    ]);
    assert_eq!(text.as_bytes(), &again.stdout[..]);
}

#[test]
fn optimize_writes_history_and_policy() {
    let dir = tempfile::tempdir().unwrap();
    let chain = configs().join("commute_chain.json");
    for solver in ["vi", "pg"] {
        let out = dedp(&[
            "optimize",
            "--config",
            path(&chain),
            "--solver",
            solver,
            "--epochs",
            "3",
            "--seed",
            "2",
            "--horizon",
            "24",
            "--out",
            path(dir.path()),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let history = fs::read_to_string(dir.path().join(format!("{solver}_seed2.csv"))).unwrap();
        let lines: Vec<&str> = history.lines().collect();
        assert_eq!(
            lines[0],
            "epoch,elbo,mc_value_mean,mc_value_stderr,grad_norm,wall_ms"
        );
        assert!(lines.len() >= 2 && lines.len() <= 5);
        let policy = dir.path().join(format!("{solver}_seed2_policy.json"));
        let ev = dedp(&[
            "evaluate",
            "--config",
            path(&chain),
            "--horizon",
            "24",
            "--policy",
            path(&policy),
        ]);
        assert!(ev.status.success());
    }
}

#[test]
fn benchmark_writes_the_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dedp(&[
        "benchmark",
        "--config",
        path(&configs().join("commute_chain_benchmark.json")),
        "--epochs",
        "2",
        "--out",
        path(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["solvers"].as_array().unwrap().len(), 2);
    assert_eq!(summary["epochs"], 2);
    for file in [
        "vi_seed1.csv",
        "pg_seed3.csv",
        "occupancy_vi.csv",
        "occupancy_initial.csv",
        "pg_seed2_policy.json",
    ] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
}

#[test]
fn exit_codes_separate_config_numeric_and_io_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(
        dedp(&["evaluate", "--config", path(&missing)])
            .status
            .code(),
        Some(4)
    );

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{ not json").unwrap();
    assert_eq!(
        dedp(&["evaluate", "--config", path(&broken)]).status.code(),
        Some(2)
    );

    let chain = configs().join("commute_chain.json");
    assert_eq!(
        dedp(&["optimize", "--config", path(&chain), "--solver", "ac"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        dedp(&["evaluate", "--config", path(&chain), "--horizon", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(dedp(&["evaluate"]).status.code(), Some(2));

    let over = dir.path().join("over.json");
    fs::write(&over, OVERFLOWING).unwrap();
    let out = dedp(&["simulate", "--config", path(&over), "--horizon", "5"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let blocked = dir.path().join("file");
    fs::write(&blocked, "").unwrap();
    let out = dedp(&[
        "simulate",
        "--config",
        path(&chain),
        "--horizon",
        "5",
        "--out",
        path(&blocked.join("sub")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}
