use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{ensure, Error, Result};

/// `100 · (1 − matches / total)`.
pub fn top1_error(predictions: &[ClassId], truths: &[ClassId]) -> Result<f64> {
    ensure(!predictions.is_empty(), || "no predictions to score".into())?;
    ensure(predictions.len() == truths.len(), || {
        format!("{} predictions but {} truths", predictions.len(), truths.len())
    })?;
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(100.0 * (1.0 - hits as f64 / predictions.len() as f64))
}

/// Rounds to one decimal place, the precision every report column uses.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub train_resolution: usize,
    pub test_resolution: usize,
    /// Percent, one decimal.
    pub top1_error: f64,
}

impl ReportRow {
    pub fn new(model: impl Into<String>, train_resolution: usize, test_resolution: usize, error: f64) -> Self {
        ReportRow { model: model.into(), train_resolution, test_resolution, top1_error: round1(error) }
    }

    pub fn top1_accuracy(&self) -> f64 {
        100.0 - self.top1_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRow {
    /// Which mined set: `iterative`, `cluster` or `intersect`.
    pub source: String,
    pub round: usize,
    pub pseudo_count: usize,
    /// Percent of entries matching the hidden labels; `None` for an empty set.
    pub precision: Option<f64>,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub models: Vec<ReportRow>,
    pub fused: Vec<ReportRow>,
    pub mining: Vec<MiningRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

const MODEL_COLUMNS: [&str; 4] = ["Model", "Training resolution", "Test resolution", "Error(%)"];
const FUSED_COLUMNS: [&str; 4] = ["Fused", "Training resolution", "Test resolution", "Error(%)"];
const MINING_COLUMNS: [&str; 5] = ["Source", "Round", "Pseudo count", "Precision(%)", "Val accuracy(%)"];

fn model_cells(r: &ReportRow) -> Vec<String> {
    vec![
        r.model.clone(),
        r.train_resolution.to_string(),
        r.test_resolution.to_string(),
        format!("{:.1}", r.top1_error),
    ]
}

fn mining_cells(r: &MiningRow) -> Vec<String> {
    vec![
        r.source.clone(),
        r.round.to_string(),
        r.pseudo_count.to_string(),
        r.precision.map_or_else(|| "-".to_string(), |p| format!("{p:.1}")),
        format!("{:.1}", r.val_accuracy),
    ]
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    for row in rows {
        let _ = writeln!(out, "{}", line(row.iter().map(String::as_str).collect()));
    }
}

fn csv_section(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "{}", header.join(","));
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
}

/// Model rows always carry a header; the fused and mining sections appear
/// only when they have rows.
pub fn render_report(report: &MetricsReport, format: ReportFormat) -> String {
    let mut out = String::new();
    let sections: [(&[&str], Vec<Vec<String>>, bool); 3] = [
        (&MODEL_COLUMNS, report.models.iter().map(model_cells).collect(), true),
        (&FUSED_COLUMNS, report.fused.iter().map(model_cells).collect(), false),
        (&MINING_COLUMNS, report.mining.iter().map(mining_cells).collect(), false),
    ];
    for (header, rows, always) in sections {
        if rows.is_empty() && !always {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        match format {
            ReportFormat::Table => table(&mut out, header, &rows),
            ReportFormat::Csv => csv_section(&mut out, header, &rows),
        }
    }
    out
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: &Path) -> Result<()> {
    fs::write(path, render_report(report, format)).map_err(|e| Error::io(path, e))
}

fn parse_model_row(fields: &[&str], bad: &dyn Fn(&str) -> Error) -> Result<ReportRow> {
    if fields.len() != 4 {
        return Err(bad("expected 4 fields"));
    }
    Ok(ReportRow {
        model: fields[0].to_string(),
        train_resolution: fields[1].parse().map_err(|_| bad("bad training resolution"))?,
        test_resolution: fields[2].parse().map_err(|_| bad("bad test resolution"))?,
        top1_error: fields[3].parse().map_err(|_| bad("bad error"))?,
    })
}

fn parse_mining_row(fields: &[&str], bad: &dyn Fn(&str) -> Error) -> Result<MiningRow> {
    if fields.len() != 5 {
        return Err(bad("expected 5 fields"));
    }
    Ok(MiningRow {
        source: fields[0].to_string(),
        round: fields[1].parse().map_err(|_| bad("bad round"))?,
        pseudo_count: fields[2].parse().map_err(|_| bad("bad pseudo count"))?,
        precision: match fields[3] {
            "-" => None,
            p => Some(p.parse().map_err(|_| bad("bad precision"))?),
        },
        val_accuracy: fields[4].parse().map_err(|_| bad("bad validation accuracy"))?,
    })
}

/// Inverse of the CSV rendering.
pub fn parse_report_csv(text: &str, origin: &str) -> Result<MetricsReport> {
    #[derive(Clone, Copy, PartialEq)]
    enum Section {
        None,
        Models,
        Fused,
        Mining,
    }
    let mut report = MetricsReport::default();
    let mut section = Section::None;
    for (n, line) in text.lines().enumerate() {
        let bad = |what: &str| Error::integrity(format!("{origin}:{}: {what}", n + 1));
        if line.is_empty() {
            section = Section::None;
            continue;
        }
        if section == Section::None {
            section = if line == MODEL_COLUMNS.join(",") {
                Section::Models
            } else if line == FUSED_COLUMNS.join(",") {
                Section::Fused
            } else if line == MINING_COLUMNS.join(",") {
                Section::Mining
            } else {
                return Err(bad(&format!("unknown section header `{line}`")));
            };
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match section {
            Section::Models => report.models.push(parse_model_row(&fields, &bad)?),
            Section::Fused => report.fused.push(parse_model_row(&fields, &bad)?),
            Section::Mining => report.mining.push(parse_mining_row(&fields, &bad)?),
            Section::None => unreachable!(),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top1_error_examples() {
        assert_eq!(top1_error(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(top1_error(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 25.0);
        let p = [4, 4, 0, 9, 1];
        assert_eq!(top1_error(&p, &p).unwrap(), 0.0);
        assert_eq!(top1_error(&[0, 1], &[1, 0]).unwrap(), 100.0);
        assert!(top1_error(&[], &[]).is_err());
        assert!(top1_error(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = MetricsReport::default();
        assert_eq!(render_report(&r, ReportFormat::Csv), "Model,Training resolution,Test resolution,Error(%)\n");
        assert_eq!(render_report(&r, ReportFormat::Table).lines().count(), 2);
        assert_eq!(parse_report_csv(&render_report(&r, ReportFormat::Csv), "t").unwrap(), r);
    }

    #[test]
    fn one_row_one_line() {
        let r = MetricsReport { models: vec![ReportRow::new("fused-v3", 32, 64, 12.94)], ..Default::default() };
        let csv = render_report(&r, ReportFormat::Csv);
        assert_eq!(csv.lines().collect::<Vec<_>>(), ["Model,Training resolution,Test resolution,Error(%)", "fused-v3,32,64,12.9"]);
        let table = render_report(&r, ReportFormat::Table);
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(2).unwrap().ends_with("| 12.9"));
        assert!((r.models[0].top1_error + r.models[0].top1_accuracy() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip_with_all_sections() {
        let r = MetricsReport {
            models: vec![ReportRow::new("generic-0", 32, 32, 100.0 * (1.0 - 0.876)), ReportRow::new("x", 32, 64, 0.0)],
            fused: vec![ReportRow::new("fused/routed", 32, 32, 41.6)],
            mining: vec![
                MiningRow { source: "iterative".into(), round: 1, pseudo_count: 812, precision: Some(96.2), val_accuracy: 51.5 },
                MiningRow { source: "cluster".into(), round: 1, pseudo_count: 0, precision: None, val_accuracy: 0.0 },
            ],
        };
        let csv = render_report(&r, ReportFormat::Csv);
        assert_eq!(parse_report_csv(&csv, "t").unwrap(), r);
        assert!(parse_report_csv("Nope\n", "t").is_err());
        assert!(parse_report_csv("Model,Training resolution,Test resolution,Error(%)\na,b,c,d\n", "t").is_err());
    }
}
