use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use committee_core::RunReport;

use crate::error::{CliError, Result};
use crate::experiment::committee_label;
use crate::improvement::{improvement_percent, Direction};

/// Method rows in the order the table prints them; unknown names follow.
const METHOD_ORDER: [&str; 6] = ["none", "teacher", "ld", "fd", "mt", "qa"];

/// Metrics grouped by method and committee, averaged over seeds on output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    cells: BTreeMap<(String, String), Vec<f64>>,
    /// Best-teacher metric per committee, one entry per report.
    teachers: BTreeMap<String, Vec<f64>>,
}

impl Table {
    pub fn add(&mut self, method: &str, committee: &str, metric: f64) {
        self.cells
            .entry((method.to_string(), committee.to_string()))
            .or_default()
            .push(metric);
    }

    pub fn add_report(&mut self, r: &RunReport) {
        let committee = committee_label(&r.committee);
        self.add(&r.method, &committee, r.final_metric);
        let best = r
            .teacher_metrics
            .iter()
            .map(|t| t.test_mse)
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            self.teachers.entry(committee).or_default().push(best);
        }
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.cells.keys().map(|(m, _)| m.clone()).collect();
        m.sort_by_key(|name| {
            let rank = METHOD_ORDER.iter().position(|o| o == name).unwrap_or(METHOD_ORDER.len());
            (rank, name.clone())
        });
        m.dedup();
        m
    }

    /// Committee columns; the supervised-only `-` column is dropped when the
    /// baseline is the only thing in it.
    pub fn committees(&self) -> Vec<String> {
        let mut c: Vec<String> = self.cells.keys().map(|(_, c)| c.clone()).collect();
        c.sort();
        c.dedup();
        if c.len() > 1 {
            c.retain(|name| name != "-" || self.cells.keys().any(|(m, k)| k == "-" && m != "none"));
        }
        c
    }

    pub fn metric(&self, method: &str, committee: &str) -> Option<f64> {
        if let Some(v) = self.cells.get(&(method.to_string(), committee.to_string())) {
            return Some(mean(v));
        }
        // The supervised baseline has no committee; show it in every column.
        if method == "none" {
            return self.baseline();
        }
        None
    }

    pub fn baseline(&self) -> Option<f64> {
        let all: Vec<f64> = self
            .cells
            .iter()
            .filter(|((m, _), _)| m == "none")
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        (!all.is_empty()).then(|| mean(&all))
    }

    pub fn best_teacher(&self, committee: &str) -> Option<f64> {
        if let Some(v) = self.teachers.get(committee) {
            return Some(mean(v));
        }
        self.cells
            .get(&("teacher".to_string(), committee.to_string()))
            .map(|v| mean(v))
    }

    pub fn improvement(&self, method: &str, committee: &str) -> Option<f64> {
        if method == "none" || method == "teacher" {
            return None;
        }
        let m = self.cells.get(&(method.to_string(), committee.to_string()))?;
        improvement_percent(self.baseline()?, mean(m), self.best_teacher(committee)?, Direction::LowerBetter).ok()
    }

    /// `method,<committee>...` grid of raw metrics; absent cells are `NA`.
    pub fn metrics_csv(&self) -> Result<String> {
        self.grid_csv(|m, c| self.metric(m, c).map(fmt_metric))
    }

    /// The same grid holding gap-closed improvement percentages.
    pub fn improvement_csv(&self) -> Result<String> {
        self.grid_csv(|m, c| self.improvement(m, c).map(fmt_pct))
    }

    fn grid_csv(&self, cell: impl Fn(&str, &str) -> Option<String>) -> Result<String> {
        let committees = self.committees();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        header.extend(committees.iter().cloned());
        w.write_record(&header)?;
        for m in self.methods() {
            let mut row = vec![m.clone()];
            row.extend(committees.iter().map(|c| cell(&m, c).unwrap_or_else(|| "NA".into())));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned text: each cell is `metric (improvement%)`.
    pub fn render_text(&self) -> String {
        let committees = self.committees();
        let mut rows = vec![{
            let mut h = vec!["method".to_string()];
            h.extend(committees.iter().cloned());
            h
        }];
        for m in self.methods() {
            let mut row = vec![m.clone()];
            for c in &committees {
                let cell = match (self.metric(&m, c), self.improvement(&m, c)) {
                    (None, _) => "NA".to_string(),
                    (Some(v), None) => fmt_metric(v),
                    (Some(v), Some(p)) => format!("{} ({}%)", fmt_metric(v), fmt_pct(p)),
                };
                row.push(cell);
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, w))| {
                    if i == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).expect("write to string");
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.len() == 1 {
        return v[0];
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Shortest text that parses back to the same value.
pub fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

fn fmt_pct(p: f64) -> String {
    format!("{p:.2}")
}

/// Collects report JSON files (directories are searched recursively) and
/// `method,committee,metric` CSVs into one table.
pub fn ingest(inputs: &[PathBuf]) -> Result<Table> {
    let mut files = Vec::new();
    for p in inputs {
        collect(p, &mut files)?;
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config("no report files found".into()));
    }
    let mut table = Table::default();
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| CliError::io(f, e))?;
        if f.extension().is_some_and(|e| e == "csv") {
            ingest_csv(f, &text, &mut table)?;
        } else {
            let r = RunReport::from_json(&text).map_err(|e| CliError::Input {
                path: f.clone(),
                message: e.to_string(),
            })?;
            table.add_report(&r);
        }
    }
    Ok(table)
}

fn collect(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        for entry in fs::read_dir(p).map_err(|e| CliError::io(p, e))? {
            let path = entry.map_err(|e| CliError::io(p, e))?.path();
            if path.is_dir() {
                collect(&path, out)?;
            } else if path.extension().is_some_and(|e| e == "json")
                && path.file_name().is_some_and(|n| n != "config.json" && n != "importance_summary.json")
            {
                out.push(path);
            }
        }
        Ok(())
    } else if p.exists() {
        out.push(p.to_path_buf());
        Ok(())
    } else {
        Err(CliError::Input {
            path: p.to_path_buf(),
            message: "no such file or directory".into(),
        })
    }
}

fn ingest_csv(path: &Path, text: &str, table: &mut Table) -> Result<()> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| CliError::Input {
            path: path.to_path_buf(),
            message: format!("missing `{name}` column (need method,committee,metric)"),
        })
    };
    let (mc, cc, vc) = (col("method")?, col("committee")?, col("metric")?);
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(vc).unwrap_or("");
        if raw == "NA" || raw.is_empty() {
            continue;
        }
        let v: f64 = raw.parse().map_err(|_| CliError::Input {
            path: path.to_path_buf(),
            message: format!("row {}: metric `{raw}` is not a number", line + 2),
        })?;
        let method = rec.get(mc).unwrap_or("").to_lowercase();
        table.add(&method, rec.get(cc).unwrap_or(""), v);
    }
    Ok(())
}
