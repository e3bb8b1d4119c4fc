//! CSV and JSON rendering of a [`MetricsReport`].

use std::fs;
use std::path::{Path, PathBuf};

use super::experiment::{Method, MetricsReport};
use crate::error::{Error, Result};

pub const NA: &str = "NA";
pub const UNIT_ACCURACY: &str = "unit accuracy (word-accuracy analogue)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| format!("{x:.6}"))
}

/// The budget used for the methods-by-metrics table: the first configured.
pub fn primary_budget(report: &MetricsReport) -> Option<usize> {
    report
        .config
        .get("labeled_budgets")
        .and_then(|s| s.split(',').next())
        .and_then(|s| s.trim().parse().ok())
        .or_else(|| report.labeled_budgets().first().copied())
}

pub fn table1(report: &MetricsReport) -> Vec<Vec<String>> {
    let mut rows = vec![vec![
        "method".to_string(),
        "labeled".to_string(),
        "frame accuracy".to_string(),
        UNIT_ACCURACY.to_string(),
        "cells".to_string(),
    ]];
    let Some(l) = primary_budget(report) else {
        return rows;
    };
    for m in Method::ALL {
        let n = report.cells.iter().filter(|c| c.method == m && c.labeled == l).count();
        if n == 0 && !report.methods().contains(&m) {
            continue;
        }
        rows.push(vec![
            m.label().to_string(),
            l.to_string(),
            fmt(report.median_frame_accuracy(m, l)),
            fmt(report.median_unit_accuracy(m, l)),
            n.to_string(),
        ]);
    }
    rows
}

pub fn table2(report: &MetricsReport) -> Vec<Vec<String>> {
    let budgets = report.labeled_budgets();
    let mut header = vec!["method".to_string()];
    header.extend(budgets.iter().map(|l| format!("frame accuracy ({l} labeled)")));
    header.extend(budgets.iter().map(|l| format!("{UNIT_ACCURACY} ({l} labeled)")));
    let mut rows = vec![header];
    for m in report.methods() {
        let mut row = vec![m.label().to_string()];
        row.extend(budgets.iter().map(|&l| fmt(report.median_frame_accuracy(m, l))));
        row.extend(budgets.iter().map(|&l| fmt(report.median_unit_accuracy(m, l))));
        rows.push(row);
    }
    rows
}

/// One row per granularity; PTDNN metrics are NA when discovery did not
/// converge at that granularity.
pub fn fig2(report: &MetricsReport) -> Vec<Vec<String>> {
    let mut rows = vec![vec![
        "granularity".to_string(),
        "m".to_string(),
        "n".to_string(),
        "converged fraction".to_string(),
        format!("PTDNN {UNIT_ACCURACY}"),
        "PTDNN frame accuracy".to_string(),
        format!("fDLR {UNIT_ACCURACY}"),
    ]];
    let Some(l) = primary_budget(report) else {
        return rows;
    };
    let base = report.median_unit_accuracy(Method::Fdlr, l);
    for g in &report.granularities {
        let (m, n) = g.split_once('x').unwrap_or((g, ""));
        let ptdnn = report.granularity_converged(g).then(|| report.median_for_granularity(g, l)).flatten();
        rows.push(vec![
            g.clone(),
            m.to_string(),
            n.to_string(),
            fmt(report.converged_fraction(g)),
            fmt(ptdnn.map(|p| p.1)),
            fmt(ptdnn.map(|p| p.0)),
            fmt(base),
        ]);
    }
    rows
}

fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    r.records()
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect()
}

/// Parses a table cell written by this module; `NA` becomes `None`.
pub fn parse_value(cell: &str) -> Result<Option<f64>> {
    if cell == NA {
        return Ok(None);
    }
    cell.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad numeric cell {cell:?}")))
}

/// Writes the tables (and/or the full JSON report) to `dir`, returning the
/// paths written.
pub fn emit_report(report: &MetricsReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Csv) {
        for (name, rows) in [("table1.csv", table1(report)), ("table2.csv", table2(report)), ("fig2.csv", fig2(report))] {
            let p = dir.join(name);
            write_csv(&p, &rows)?;
            written.push(p);
        }
    }
    if formats.contains(&ReportFormat::Json) {
        let p = dir.join("report.json");
        fs::write(&p, serde_json::to_string_pretty(report)?)?;
        written.push(p);
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiment::{DiscoveryDiagnostics, MetricCell};
    use std::collections::BTreeMap;

    fn cell(method: Method, seed: u64, labeled: usize, g: Option<&str>, fa: f64, ua: f64) -> MetricCell {
        MetricCell {
            method,
            speaker: "ad00".into(),
            seed,
            labeled,
            unlabeled: 500 - labeled,
            granularity: g.map(str::to_string),
            frame_accuracy: fa,
            unit_accuracy: ua,
            unit_error_rate: 1.0 - ua,
            fusion_alpha: None,
            wall_time_s: 0.0,
        }
    }

    fn report() -> MetricsReport {
        let mut config = BTreeMap::new();
        config.insert("labeled_budgets".to_string(), "50,10".to_string());
        let mut cells = Vec::new();
        for seed in 0..3 {
            for l in [10, 50] {
                cells.push(cell(Method::Si, seed, l, None, 0.5, 0.4));
                cells.push(cell(Method::Fdlr, seed, l, None, 0.6 + seed as f64 * 0.01, 0.5));
                cells.push(cell(Method::Ptdnn, seed, l, Some("3x8"), 0.7, 0.6));
                cells.push(cell(Method::Ptdnn, seed, l, Some("5x16"), 0.65, 0.55));
            }
        }
        let diag = |g: &str, converged| DiscoveryDiagnostics {
            speaker: "ad00".into(),
            seed: 0,
            granularity: g.into(),
            converged,
            iterations: 3,
            final_changed_fraction: Some(0.0),
            nmi: 0.5,
        };
        MetricsReport {
            config,
            granularities: vec!["3x8".into(), "5x16".into()],
            cells,
            discovery: vec![diag("3x8", true), diag("5x16", false)],
            checks: Vec::new(),
            wall_time_s: 1.0,
        }
    }

    #[test]
    fn emit_then_parse_gives_the_same_values() {
        let r = report();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&r, dir.path(), &[ReportFormat::Csv, ReportFormat::Json]).unwrap();
        assert_eq!(files.len(), 4);
        let t1 = read_csv(&dir.path().join("table1.csv")).unwrap();
        assert_eq!(t1, table1(&r));
        assert!(t1[0][3].contains("word-accuracy analogue"));
        let fdlr = t1.iter().find(|row| row[0] == "fDLR").unwrap();
        assert_eq!(parse_value(&fdlr[2]).unwrap(), Some(0.61));
        assert_eq!(fdlr[1], "50");
        let t2 = read_csv(&dir.path().join("table2.csv")).unwrap();
        assert_eq!(t2, table2(&r));
        assert_eq!(t2[0].len(), 5);
        assert_eq!(load_report(&dir.path().join("report.json")).unwrap(), r);
    }

    #[test]
    fn non_converged_granularity_is_na() {
        let rows = fig2(&report());
        assert_eq!(rows.len(), 3);
        assert_eq!(parse_value(&rows[1][4]).unwrap(), Some(0.6));
        assert_eq!(rows[2][0], "5x16");
        assert_eq!(rows[2][4], NA);
        assert_eq!(rows[2][5], NA);
    }

    #[test]
    fn missing_method_cells_are_na() {
        let mut r = report();
        r.cells.retain(|c| !(c.method == Method::Fdlr && c.labeled == 50));
        let t1 = table1(&r);
        let fdlr = t1.iter().find(|row| row[0] == "fDLR").unwrap();
        assert_eq!(fdlr[2], NA);
    }
}
