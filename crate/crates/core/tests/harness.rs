//! Benchmark harness: report schema, reproducibility and occupancy.

mod common;

use std::fs;
use std::path::Path;

use common::*;
use dedp_core::harness::{run_benchmark_in_memory, ScenarioRef};
use dedp_core::{run_benchmark, RunConfig, ScenarioConfig, ScheduleSpec, Solver};

fn town_config(epochs: usize, seeds: Vec<u64>) -> RunConfig {
    let scenario = ScenarioConfig::Synthtown {
        n_individuals: 3,
        network: Some(small_town()),
        schedule: ScheduleSpec {
            steps_per_day: 24,
            work_start: 8,
            work_end: 16,
            ..Default::default()
        },
        gamma: 0.95,
        clock_bins: 4,
    };
    let mut cfg: RunConfig = serde_json::from_value(serde_json::json!({
        "scenario": scenario,
        "epochs": epochs,
        "seeds": seeds,
        "horizon": 24,
        "mc_rollouts": 20,
        "occupancy_rollouts": 10,
    }))
    .unwrap();
    cfg.pg.rollouts = 4;
    cfg.pg.perturbations = 2;
    cfg
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv" || x == "json") && !p.ends_with("summary.json")
        })
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn both_solvers_report_with_the_same_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = town_config(3, vec![1, 2]);
    run_benchmark(&cfg, dir.path()).unwrap();
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    let rows = summary["solvers"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["solver"], "vi");
    assert_eq!(rows[1]["solver"], "pg");
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&rows[0]), keys(&rows[1]));
    for row in rows {
        assert_eq!(row["trpe"].as_array().unwrap().len(), 2);
    }
    for solver in ["vi", "pg"] {
        for seed in [1, 2] {
            let text =
                fs::read_to_string(dir.path().join(format!("{solver}_seed{seed}.csv"))).unwrap();
            let mut lines = text.lines();
            assert_eq!(
                lines.next().unwrap(),
                "epoch,elbo,mc_value_mean,mc_value_stderr,grad_norm,wall_ms"
            );
            assert!(lines.count() >= 1);
            assert!(dir
                .path()
                .join(format!("{solver}_seed{seed}_policy.json"))
                .exists());
        }
        assert!(dir.path().join(format!("occupancy_{solver}.csv")).exists());
    }
    assert!(dir.path().join("occupancy_initial.csv").exists());
}

#[test]
fn zero_epochs_report_the_initial_value() {
    let mut cfg = town_config(0, vec![4]);
    cfg.solvers = vec![Solver::Vi];
    let report = run_benchmark_in_memory(&cfg).unwrap();
    let run = &report.runs[0];
    assert_eq!(run.history.len(), 1);
    let row = &report.summary.solvers[0];
    assert_eq!(row.trpe, vec![run.history[0].mc_value_mean]);
    assert_eq!(row.trpe_mean, report.summary.initial_value_mean);
    assert_eq!(row.epochs_to_converge, vec![0]);
}

#[test]
fn reruns_write_byte_identical_files() {
    let cfg = town_config(3, vec![7, 8]);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_benchmark(&cfg, a.path()).unwrap();
    run_benchmark(&cfg, b.path()).unwrap();
    let (fa, fb) = (csv_files(a.path()), csv_files(b.path()));
    assert_eq!(fa.len(), 4 + 4 + 3);
    assert_eq!(fa, fb);
}

#[test]
fn occupancy_rows_sum_to_the_population() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = town_config(2, vec![3]);
    run_benchmark(&cfg, dir.path()).unwrap();
    for label in ["vi", "pg", "initial"] {
        let mut reader =
            csv::Reader::from_path(dir.path().join(format!("occupancy_{label}.csv"))).unwrap();
        assert_eq!(
            reader.headers().unwrap().iter().collect::<Vec<_>>(),
            vec!["t", "home", "work", "road"]
        );
        let mut rows = 0;
        for rec in reader.records() {
            let rec = rec.unwrap();
            let total: f64 = rec.iter().skip(1).map(|x| x.parse::<f64>().unwrap()).sum();
            assert!(
                (total - 3.0).abs() <= 1e-9,
                "{label} t {}: {total}",
                &rec[0]
            );
            rows += 1;
        }
        assert_eq!(rows, 25);
    }
}

#[test]
fn config_file_resolves_scenario_next_to_it() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("chain.json"),
        r#"{"kind":"commute_chain","n_locations":2,"n_individuals":1}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("run.json"),
        r#"{"scenario":"chain.json","epochs":1,"seeds":[1],"solvers":["vi"]}"#,
    )
    .unwrap();
    let cfg = RunConfig::load(&dir.path().join("run.json")).unwrap();
    assert!(matches!(&cfg.scenario, ScenarioRef::Path(p) if p.is_absolute()));
    assert!(matches!(
        cfg.scenario_config().unwrap(),
        ScenarioConfig::CommuteChain { n_locations: 2, .. }
    ));
}
