//! CSV and plain-text renderings of error reports, depth studies and loss traces.

use std::path::Path;

use c4_core::eval::{ErrorReport, StudyRow};
use c4_core::train::EpochLoss;

use crate::error::{C4Error, Result};

pub const COLUMNS: [&str; 5] = ["Mean", "Median", "Tri-mean", "Best 25%", "Worst 25%"];

fn stats(r: &ErrorReport) -> [f64; 5] {
    [r.mean, r.median, r.trimean, r.best25_mean, r.worst25_mean]
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| C4Error::format(path, e.to_string()))?;
    let fail = |e: csv::Error| C4Error::format(path, e.to_string());
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row).map_err(fail)?;
    }
    w.flush().map_err(|e| C4Error::io(path, e))
}

/// One row per named report: `name,n,mean,median,trimean,best25,worst25`.
pub fn reports_csv(path: &Path, reports: &[(String, &ErrorReport)]) -> Result<()> {
    let header = [
        "name", "n", "mean", "median", "trimean", "best25", "worst25",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|(name, r)| {
            let mut row = vec![name.clone(), r.n.to_string()];
            row.extend(stats(r).iter().map(f64::to_string));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Right-aligned table with a name column and the five statistics in degrees.
pub fn reports_table(reports: &[(String, &ErrorReport)]) -> String {
    let mut rows = vec![std::iter::once(String::from("Method"))
        .chain(COLUMNS.map(String::from))
        .collect::<Vec<_>>()];
    for (name, r) in reports {
        rows.push(
            std::iter::once(name.clone())
                .chain(stats(r).iter().map(|v| format!("{v:.2}")))
                .collect(),
        );
    }
    align(&rows)
}

fn align(rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// `stages,n,mean,...,worst25,p_next` where `p_next` is `P(L-1, L)` when defined.
pub fn study_rows(rows: &[StudyRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = [
        "stages", "n", "mean", "median", "trimean", "best25", "worst25", "p_last",
    ]
    .map(String::from)
    .to_vec();
    let body = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.stages.to_string(), r.report.n.to_string()];
            row.extend(stats(&r.report).iter().map(f64::to_string));
            row.push(r.improvement.last().map(f64::to_string).unwrap_or_default());
            row
        })
        .collect();
    (header, body)
}

pub fn study_csv(path: &Path, rows: &[StudyRow]) -> Result<()> {
    let (header, body) = study_rows(rows);
    write_csv(path, &header, &body)
}

pub fn study_table(rows: &[StudyRow]) -> String {
    let mut table = vec![[
        "L",
        "Mean",
        "Median",
        "Tri-mean",
        "Best 25%",
        "Worst 25%",
        "P(L-1,L)",
    ]
    .map(String::from)
    .to_vec()];
    for r in rows {
        let mut row = vec![r.stages.to_string()];
        row.extend(stats(&r.report).iter().map(|v| format!("{v:.2}")));
        row.push(
            r.improvement
                .last()
                .map(|p| format!("{:.1}%", 100.0 * p))
                .unwrap_or_else(|| "-".into()),
        );
        table.push(row);
    }
    align(&table)
}

/// `epoch,mean_loss_deg`.
pub fn trace_csv(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    let header = ["epoch", "mean_loss_deg"].map(String::from);
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|e| vec![e.epoch.to_string(), e.mean_loss_deg.to_string()])
        .collect();
    write_csv(path, &header, &rows)
}
