use std::fs;
use std::path::Path;

use committee_core::committee::{select_teachers, write_importance_csv, ImportanceVector};
use committee_core::models::save_checkpoint;
use committee_core::training::importance_scores;
use committee_core::{HasParams, RunReport, TrainData};
use serde::Serialize;

use crate::config::{Command, ExperimentConfig, Method, ReportArgs};
use crate::error::{CliError, Result};
use crate::experiment::{committee_label, MethodRun, SeedContext};
use crate::report::{fmt_metric, ingest, Table};

/// Threshold reported by `importance-dump` when none is configured.
pub const DEFAULT_DUMP_THRESHOLD: f64 = 0.6;

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn execute(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    write_file(&cfg.out.join("config.json"), cfg.to_json()?)?;
    match cfg.command {
        Command::Run => cmd_run(cfg),
        Command::Matrix => cmd_matrix(cfg),
        Command::ImportanceDump => cmd_importance_dump(cfg).map(|r| vec![r]),
        Command::Teachers => cmd_teachers(cfg),
    }
}

fn file_stem(r: &RunReport) -> String {
    let label = if r.committee.is_empty() {
        "supervised".to_string()
    } else {
        committee_label(&r.committee)
    };
    format!("{}_{}_seed{}", r.method, label, r.seed)
}

fn write_report(dir: &Path, r: &RunReport) -> Result<()> {
    let stem = file_stem(r);
    write_file(&dir.join(format!("{stem}.json")), r.to_json()?)?;
    let mut epochs = Vec::new();
    r.write_epoch_csv(&mut epochs)?;
    write_file(&dir.join(format!("{stem}.epochs.csv")), epochs)
}

fn write_aggregate(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "committee",
        "seed",
        "metric",
        "best_teacher",
        "skip_rate",
        "initial_train_loss",
        "final_train_loss",
    ])?;
    for r in reports {
        let best = r.teacher_metrics.iter().map(|t| t.test_mse).fold(f64::INFINITY, f64::min);
        w.write_record([
            r.method.clone(),
            committee_label(&r.committee),
            r.seed.to_string(),
            fmt_metric(r.final_metric),
            fmt_metric(best),
            r.teacher_passes.skip_rate().to_string(),
            fmt_metric(r.initial_train_loss),
            fmt_metric(r.final_train_loss),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    write_file(path, bytes)
}

fn announce(r: &RunReport) {
    println!(
        "{} [{}] seed {}: test MSE {}",
        r.method,
        committee_label(&r.committee),
        r.seed,
        fmt_metric(r.final_metric)
    );
}

fn base_run(cfg: &ExperimentConfig, method: Method, committee: Vec<String>) -> MethodRun {
    MethodRun {
        method,
        committee,
        alpha: cfg.alpha,
        threshold: cfg.threshold,
    }
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    let committee = if cfg.method == Method::None { Vec::new() } else { cfg.teachers.clone() };
    let run = base_run(cfg, cfg.method, committee);
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let mut ctx = SeedContext::prepare(cfg, seed)?;
        let r = ctx.run(&run)?;
        announce(&r);
        write_report(&cfg.out.join("runs"), &r)?;
        reports.push(r);
    }
    write_aggregate(&cfg.out.join("aggregate.csv"), &reports)?;
    Ok(reports)
}

/// The runs the matrix performs for one seed, in order.
pub fn matrix_runs(cfg: &ExperimentConfig) -> Vec<MethodRun> {
    let mut runs = vec![base_run(cfg, Method::None, Vec::new())];
    for t in &cfg.teachers {
        for m in [Method::Ld, Method::Fd, Method::Qa] {
            runs.push(base_run(cfg, m, vec![t.clone()]));
        }
    }
    if cfg.teachers.len() > 1 {
        for m in [Method::Ld, Method::Fd, Method::Mt, Method::Qa] {
            runs.push(base_run(cfg, m, cfg.teachers.clone()));
        }
    }
    runs
}

fn teacher_report(ctx: &mut SeedContext, name: &str) -> Result<RunReport> {
    let mut r = ctx.teacher(name)?.1.clone();
    r.committee = vec![name.to_string()];
    Ok(r)
}

pub fn cmd_matrix(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    let mut table = Table::default();
    for &seed in &cfg.seeds {
        let mut ctx = SeedContext::prepare(cfg, seed)?;
        for t in &cfg.teachers {
            let r = teacher_report(&mut ctx, t)?;
            write_report(&cfg.out.join("teachers"), &r)?;
            table.add_report(&r);
        }
        for run in matrix_runs(cfg) {
            let r = ctx.run(&run)?;
            announce(&r);
            write_report(&cfg.out.join("runs"), &r)?;
            table.add_report(&r);
            reports.push(r);
        }
    }
    write_aggregate(&cfg.out.join("aggregate.csv"), &reports)?;
    write_tables(&cfg.out, &table)?;
    print!("{}", table.render_text());
    Ok(reports)
}

fn write_tables(out: &Path, table: &Table) -> Result<()> {
    write_file(&out.join("table.csv"), table.metrics_csv()?)?;
    write_file(&out.join("improvement.csv"), table.improvement_csv()?)?;
    write_file(&out.join("table.txt"), table.render_text())
}

pub fn cmd_report(args: &ReportArgs) -> Result<Table> {
    let table = ingest(&args.inputs)?;
    write_tables(&args.out, &table)?;
    print!("{}", table.render_text());
    Ok(table)
}

#[derive(Debug, Serialize)]
struct ImportanceSummary {
    teachers: Vec<String>,
    examples: usize,
    threshold: f64,
    /// Share of teacher passes skipped on the test split at `threshold`.
    skip_rate: f64,
    /// Threshold used while training, if any.
    training_threshold: Option<f64>,
    training_skip_rate: f64,
}

pub fn cmd_importance_dump(cfg: &ExperimentConfig) -> Result<RunReport> {
    let seed = cfg.seeds[0];
    let mut ctx = SeedContext::prepare(cfg, seed)?;
    let run = base_run(cfg, Method::Qa, cfg.teachers.clone());
    let (outcome, report) = ctx.run_full(&run)?;
    let outcome = outcome.expect("committee method returns its module");
    write_report(&cfg.out.join("runs"), &report)?;

    let threshold = cfg.threshold.unwrap_or(DEFAULT_DUMP_THRESHOLD);
    let n = cfg.teachers.len();
    let data = TrainData::new(&ctx.dataset);
    let mut rows = Vec::with_capacity(data.split.test.len());
    let (mut skipped, mut total) = (0usize, 0usize);
    for idx in data.split.test.chunks(cfg.batch_size) {
        let batch = data.batch(idx);
        let scores = importance_scores(&outcome.student, &outcome.module, &batch)?;
        let selected = select_teachers(&ImportanceVector::batch_mean(&scores)?, threshold)?;
        skipped += n - selected.len();
        total += n;
        for (r, &example) in idx.iter().enumerate() {
            rows.push((example, scores.row(r).to_vec()));
        }
    }
    let mut csv = Vec::new();
    write_importance_csv(&rows, n, &mut csv)?;
    write_file(&cfg.out.join("importance.csv"), csv)?;

    let summary = ImportanceSummary {
        teachers: cfg.teachers.clone(),
        examples: rows.len(),
        threshold,
        skip_rate: skipped as f64 / total.max(1) as f64,
        training_threshold: cfg.threshold,
        training_skip_rate: report.teacher_passes.skip_rate(),
    };
    write_file(
        &cfg.out.join("importance_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "threshold {threshold}: {:.2}% of teacher passes skipped over {} test examples",
        summary.skip_rate * 100.0,
        summary.examples
    );
    Ok(report)
}

pub fn cmd_teachers(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["teacher", "seed", "test_mse", "parameters"])?;
    for &seed in &cfg.seeds {
        let mut ctx = SeedContext::prepare(cfg, seed)?;
        for name in &cfg.teachers {
            let r = teacher_report(&mut ctx, name)?;
            ctx.teacher(name)?;
            let (model, _) = ctx.trained_teachers().find(|(n, _)| *n == name).expect("trained").1;
            let params: usize = model.params().iter().map(|p| p.value().len()).sum();
            let dir = cfg.out.join("teachers");
            write_report(&dir, &r)?;
            save_checkpoint(model, &ctx.dataset.schema, dir.join(format!("{}.ckpt", file_stem(&r))))?;
            w.write_record([name.clone(), seed.to_string(), fmt_metric(r.final_metric), params.to_string()])?;
            announce(&r);
            reports.push(r);
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&cfg.out.join("teachers.csv"), bytes)?;
    Ok(reports)
}
