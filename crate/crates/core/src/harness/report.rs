use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::metrics::{aggregate_report, MetricReport};
use crate::refine::RefinementTrace;
use crate::tasks::TaskKind;
use crate::toxicity::ToxicityScorer;

/// One row of a curve CSV. Iteration-curve rows leave `critic_count` empty
/// unless they come from a sweep; critic-curve rows leave `iteration` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub critic_count: Option<u32>,
    pub iteration: Option<u32>,
    pub metric: String,
    pub value: f64,
}

pub const CURVE_HEADER: &str = "critic_count,iteration,metric,value";

pub fn read_traces(path: &Path) -> Result<Vec<RefinementTrace>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_traces(&text)
}

pub fn parse_traces(text: &str) -> Result<Vec<RefinementTrace>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            RefinementTrace::from_json_line(l)
                .map_err(|e| HarnessError::Trace(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Rows of the iteration curve, optionally tagged with a critic count.
pub fn iteration_rows(report: &MetricReport, critic_count: Option<u32>) -> Vec<CurveRow> {
    report
        .iteration_curve
        .iter()
        .map(|p| CurveRow {
            critic_count,
            iteration: Some(p.x),
            metric: p.metric.clone(),
            value: p.value,
        })
        .collect()
}

pub fn critic_rows(report: &MetricReport) -> Vec<CurveRow> {
    report
        .critic_curve
        .iter()
        .map(|p| CurveRow {
            critic_count: Some(p.x),
            iteration: None,
            metric: p.metric.clone(),
            value: p.value,
        })
        .collect()
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Csv(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        w.write_record(CURVE_HEADER.split(','))
            .map_err(|e| HarnessError::Csv(e.to_string()))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| HarnessError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Csv(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| HarnessError::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.join(",") != CURVE_HEADER {
        return Err(HarnessError::Csv(format!(
            "{}: expected header `{CURVE_HEADER}`, found `{}`",
            path.display(),
            header.join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| HarnessError::Csv(e.to_string())))
        .collect()
}

/// Aligned text table of the headline metrics. QA shows EM and F1 as
/// percentages with two decimals; toxicity shows the mean score and both
/// diversity figures with three decimals.
pub fn render_table(report: &MetricReport) -> String {
    let kind = TaskKind::parse(&report.task_name);
    let pct = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{:.2}", v * 100.0));
    let dec = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.3}"));
    let mut header = vec!["Task".to_owned(), "N".to_owned()];
    let mut row = vec![report.task_name.clone(), report.n_examples.to_string()];
    match kind {
        Some(TaskKind::FactualQa) => {
            header.extend(["EM".to_owned(), "F1".to_owned()]);
            row.extend([pct(report.em), pct(report.f1)]);
        }
        Some(TaskKind::Toxicity) => {
            header.extend(["Toxicity", "Dist-2", "Dist-3"].map(str::to_owned));
            row.extend([dec(report.mean_toxicity), dec(report.dist2), dec(report.dist3)]);
        }
        _ => {}
    }
    if report.exclusions > 0 {
        header.push("Excluded".into());
        row.push(report.exclusions.to_string());
    }
    let widths: Vec<usize> = header
        .iter()
        .zip(&row)
        .map(|(h, r)| h.chars().count().max(r.chars().count()))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    format!("{}\n{}\n", line(&header), line(&row))
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub report: MetricReport,
    pub table: String,
    pub json_path: PathBuf,
    pub curve_path: PathBuf,
}

/// Aggregates a trace file and writes `report.json` and `curve.csv` into
/// `out_dir`.
pub async fn report(
    trace_path: &Path,
    scorer: Option<&dyn ToxicityScorer>,
    out_dir: &Path,
) -> Result<ReportOutput, HarnessError> {
    let traces = read_traces(trace_path)?;
    let report = aggregate_report(&traces, scorer).await?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&json_path, json + "\n").map_err(|e| HarnessError::io(&json_path, e))?;
    let curve_path = out_dir.join("curve.csv");
    write_curve_csv(&curve_path, &iteration_rows(&report, None))?;
    Ok(ReportOutput {
        table: render_table(&report),
        report,
        json_path,
        curve_path,
    })
}
