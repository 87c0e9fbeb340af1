//! Report files: `summary.json`, `table.txt`, and per-fold
//! `confusion_fold<k>.csv` / `roc_fold<k>.csv` for single runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablation::AblationTable;
use super::cv::{CvSummary, Stat};
use crate::error::{CmusError, Result};
use crate::metrics::{roc_csv, Metric};

pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "table.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Run(CvSummary),
    Ablation(AblationTable),
}

impl Report {
    fn rows(&self) -> Vec<&CvSummary> {
        match self {
            Report::Run(s) => vec![s],
            Report::Ablation(t) => t.rows.iter().collect(),
        }
    }
}

/// Percentages with two decimals, e.g. `95.37±2.41`.
pub fn format_stat(s: &Stat) -> String {
    match s.sd {
        Some(sd) => format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * sd),
        None => format!("{:.2}", 100.0 * s.mean),
    }
}

fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

/// Plain-text table, one row per summary: the metric columns as
/// mean±sd percentages and the ACC p-value against the reference row.
pub fn render_table(report: &Report) -> String {
    let rows = report.rows();
    let mut header = vec!["Method".to_string()];
    header.extend(Metric::ALL.iter().map(|m| m.label().to_string()));
    header.push("p(ACC)".into());
    let mut body: Vec<Vec<String>> = Vec::with_capacity(rows.len());
    for r in &rows {
        let mut line = vec![r.name.clone()];
        line.extend(Metric::ALL.iter().map(|&m| format_stat(&r.stats.get(m))));
        line.push(match &r.p_values {
            Some(p) => format_p(p.acc),
            None => "-".into(),
        });
        body.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|j| {
            body.iter()
                .map(|l| l[j].chars().count())
                .chain([header[j].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    if let Report::Ablation(t) = report {
        let _ = writeln!(out, "suite: {}  reference: {}", t.suite, t.reference);
    }
    let fmt_line = |cells: &[String]| -> String {
        let mut s = String::new();
        for (j, c) in cells.iter().enumerate() {
            let pad = widths[j] - c.chars().count();
            if j == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s
    };
    let head = fmt_line(&header);
    let _ = writeln!(out, "{head}");
    let _ = writeln!(out, "{}", "-".repeat(head.chars().count()));
    for l in &body {
        let _ = writeln!(out, "{}", fmt_line(l));
    }
    out
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CmusError::io(&path, e))
}

pub fn summary_json(report: &Report) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| CmusError::InvalidValue(format!("summary serialization: {e}")))
}

/// Writes the report files into `dir`, creating it if needed. Output bytes
/// depend only on `report`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    let rows = report.rows();
    if rows.is_empty() || rows.iter().any(|r| r.folds.is_empty()) {
        return Err(CmusError::Contract("refusing to write a report with no folds".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| CmusError::io(dir, e))?;
    write(dir, SUMMARY_FILE, &summary_json(report)?)?;
    write(dir, TABLE_FILE, &render_table(report))?;
    if let Report::Run(s) = report {
        for f in &s.folds {
            write(dir, &format!("confusion_fold{}.csv", f.fold_id), &f.confusion.to_csv())?;
            write(dir, &format!("roc_fold{}.csv", f.fold_id), &roc_csv(&f.roc))?;
        }
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| CmusError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CmusError::MalformedManifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
