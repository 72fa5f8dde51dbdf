use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use committee_cli::{improvement_percent, main_with_args, Direction, ExperimentConfig};
use committee_core::RunReport;
use proptest::prelude::*;

const TINY: &str = "synthetic:users=60,items=40,latent=3,ratings=1500";

/// A tiny, fast configuration; flags in `extra` take precedence.
fn args(cmd: &str, out: &Path, extra: &[&str]) -> Vec<String> {
    let defaults = [
        ("--dataset", TINY),
        ("--epochs", "2"),
        ("--teacher-epochs", "3"),
        ("--width-divisor", "32"),
        ("--batch-size", "64"),
    ];
    let mut v: Vec<String> = vec!["committee".into(), cmd.into(), "--out".into(), out.display().to_string()];
    for (flag, value) in defaults {
        if !extra.contains(&flag) {
            v.push(flag.into());
            v.push(value.into());
        }
    }
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn read_reports(dir: &Path) -> Vec<RunReport> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| RunReport::from_json(&fs::read_to_string(p).unwrap()).unwrap())
        .collect()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv" || e == "json" || e == "txt") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn supervised_run_writes_reports_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(main_with_args(args("run", dir.path(), &["--method", "none", "--seeds", "1,2"])), 0);
    let reports = read_reports(&dir.path().join("runs"));
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.method == "none" && r.final_metric.is_finite()));
    let agg = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 3);
    assert!(agg.starts_with("method,committee,seed,metric"));
    let epochs = fs::read_to_string(dir.path().join("runs/none_supervised_seed1.epochs.csv")).unwrap();
    assert!(epochs.starts_with("epoch,split,metric\n1,train,"));
    let cfg = ExperimentConfig::from_json(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg.seeds, [1, 2]);
}

#[test]
fn mt_with_one_teacher_matches_ld() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("ld"), dir.path().join("mt"));
    assert_eq!(main_with_args(args("run", &a, &["--method", "ld", "--teachers", "mlp-m"])), 0);
    assert_eq!(main_with_args(args("run", &b, &["--method", "mt", "--teachers", "mlp-m"])), 0);
    let (ld, mt) = (&read_reports(&a.join("runs"))[0], &read_reports(&b.join("runs"))[0]);
    assert_eq!(ld.final_metric.to_bits(), mt.final_metric.to_bits());
    assert_eq!(ld.epochs, mt.epochs);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = args("run", dir.path(), &["--method", "qa", "--threshold", "0.6"]);
    assert_eq!(main_with_args(a.clone()), 0);
    let first = snapshot(dir.path());
    assert_eq!(main_with_args(a), 0);
    assert_eq!(first, snapshot(dir.path()));
    assert!(first.keys().any(|k| k.ends_with("aggregate.csv")));
}

#[test]
fn report_reproduces_run_metrics_exactly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(main_with_args(args("run", dir.path(), &["--method", "fd", "--seeds", "4"])), 0);
    let report = &read_reports(&dir.path().join("runs"))[0];
    let out = dir.path().join("table");
    let runs = dir.path().join("runs").display().to_string();
    assert_eq!(main_with_args(["committee", "report", &runs, "--out", &out.display().to_string()]), 0);
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table, format!("method,mlp-l+text\nfd,{}\n", report.final_metric));
}

#[test]
fn hand_written_csv_keeps_values_and_marks_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("hand.csv");
    fs::write(&input, "method,committee,metric\nqa,movielens,0.8132\nmt,movielens,0.8429\nld,other,0.9\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        main_with_args(["committee", "report", &input.display().to_string(), "--out", &out.display().to_string()]),
        0
    );
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table, "method,movielens,other\nld,NA,0.9\nmt,0.8429,NA\nqa,0.8132,NA\n");
    let text = fs::read_to_string(out.join("table.txt")).unwrap();
    assert!(text.contains("0.8132") && text.contains("0.8429") && text.contains("NA"));
}

#[test]
fn importance_dump_has_one_column_per_teacher() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        main_with_args(args("importance-dump", dir.path(), &["--teachers", "mlp-m,mlp-l,text"])),
        0
    );
    let csv = fs::read_to_string(dir.path().join("importance.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "example_id,teacher_0,teacher_1,teacher_2");
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 4);
        assert!(cells[1..].iter().all(|c| {
            let v: f64 = c.parse().unwrap();
            v > 0.0 && v < 1.0
        }));
        rows += 1;
    }
    assert!(rows > 0);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("importance_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["threshold"], 0.6);
    let skip = summary["skip_rate"].as_f64().unwrap();
    assert!((0.0..1.0).contains(&skip));
    assert_eq!(summary["examples"], rows);
}

#[test]
fn matrix_fills_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(main_with_args(args("matrix", dir.path(), &["--teachers", "mlp-m,text"])), 0);
    let table = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,mlp-m,mlp-m+text,text");
    let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["none", "teacher", "ld", "fd", "mt", "qa"]);
    // Teachers only exist alone and MT only as a committee.
    let teacher: Vec<&str> = lines[2].split(',').collect();
    assert!(teacher[1] != "NA" && teacher[2] == "NA" && teacher[3] != "NA");
    assert!(lines[5].starts_with("mt,NA,") && lines[5].ends_with(",NA"));
    assert!(lines[6].split(',').skip(1).all(|c| c != "NA"));
    assert!(fs::read_to_string(dir.path().join("improvement.csv")).unwrap().starts_with("method,"));
}

#[test]
fn teachers_command_checkpoints_each_teacher() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(main_with_args(args("teachers", dir.path(), &["--teachers", "mlp-s,text"])), 0);
    for name in ["mlp-s", "text"] {
        let ckpt = dir.path().join(format!("teachers/teacher_{name}_seed0.ckpt"));
        let (model, _) = committee_core::models::load_checkpoint(&ckpt).unwrap();
        assert_eq!(model.name(), name);
    }
    let csv = fs::read_to_string(dir.path().join("teachers.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let bin = env!("CARGO_BIN_EXE_committee");
    let dir = tempfile::tempdir().unwrap();
    let status = |extra: &[&str]| {
        let a = args("run", dir.path(), extra);
        Command::new(bin).args(&a[1..]).output().unwrap().status.code()
    };
    assert_eq!(status(&["--method", "none", "--epochs", "1"]), Some(0));
    assert_eq!(status(&["--method", "kd"]), Some(1));
    assert_eq!(status(&["--threshold", "1.5"]), Some(1));
    assert_eq!(status(&["--method", "none", "--lr", "1e300"]), Some(2));
    let out = Command::new(bin).args(["run", "--out"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn divergence_leaves_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(main_with_args(args("run", dir.path(), &["--method", "qa", "--lr", "1e300", "--epochs", "2"])), 2);
    let ckpts: Vec<_> = fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
    assert!(!ckpts.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_survives_args_round_trip(
        method in prop::sample::select(vec!["qa", "ld", "fd", "mt", "none"]),
        teachers in prop::sample::subsequence(vec!["mlp-s", "mlp-m", "mlp-l", "text"], 1..=4),
        alpha in 0.0f64..100.0,
        threshold in prop::option::of(0.001f64..0.999),
        seeds in prop::collection::btree_set(any::<u64>(), 1..5),
        lr in 1e-6f64..1.0,
        epochs in 1usize..50,
        users in 1usize..5000,
        noise in 0.0f64..2.0,
    ) {
        let dataset = format!("synthetic:users={users},noise={noise}");
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        let mut argv = vec![
            "committee".to_string(), "run".into(), "--out".into(), "o".into(),
            "--method".into(), method.into(), "--teachers".into(), teachers.join(","),
            "--alpha".into(), alpha.to_string(), "--seeds".into(), seeds.join(","),
            "--lr".into(), lr.to_string(), "--epochs".into(), epochs.to_string(),
            "--dataset".into(), dataset,
        ];
        if let Some(t) = threshold {
            argv.push("--threshold".into());
            argv.push(t.to_string());
        }
        let cfg = ExperimentConfig::parse_from(argv).unwrap();
        let again = ExperimentConfig::parse_from(cfg.to_args()).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn improvement_is_affine_invariant(
        base in 0.5f64..2.0,
        teacher in 0.1f64..0.49,
        distilled in 0.0f64..3.0,
        scale in 0.01f64..100.0,
        shift in -10.0f64..10.0,
    ) {
        let lb = Direction::LowerBetter;
        let p = improvement_percent(base, distilled, teacher, lb).unwrap();
        let f = |v: f64| v * scale + shift;
        let q = improvement_percent(f(base), f(distilled), f(teacher), lb).unwrap();
        prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0));
        // Negating the metric turns it into a higher-better one with the same percentage.
        let h = improvement_percent(-base, -distilled, -teacher, Direction::HigherBetter).unwrap();
        prop_assert!((p - h).abs() <= 1e-9 * p.abs().max(1.0));
    }
}

#[test]
fn improvement_examples() {
    let lb = Direction::LowerBetter;
    assert_eq!(improvement_percent(0.9, 0.9, 0.8, lb).unwrap(), 0.0);
    assert_eq!(improvement_percent(0.9, 0.8, 0.8, lb).unwrap(), 100.0);
    assert!((improvement_percent(1.0, 0.88, 0.9, lb).unwrap() - 120.0).abs() < 1e-9);
    assert!(improvement_percent(0.9, 0.8, 0.9, lb).is_err());
}
