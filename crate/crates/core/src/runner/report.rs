//! Journal aggregation and comparison tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::journal::{read_journal, JournalContents, JournalError};
use crate::types::MetricKind;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("journal {0} has no iteration entries")]
    EmptyJournal(String),
    #[error("nothing to export")]
    EmptyReport,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: MetricKind,
    /// Records contributing to this metric.
    pub records: usize,
    /// Mean at each iteration, carrying stopped records forward.
    pub curve: Vec<f64>,
    pub baseline: f64,
    pub final_value: f64,
    /// Highest mean over iterations 1.. (the baseline if there are none).
    pub best_value: f64,
    pub best_iteration: u32,
    pub final_improvement_pct: Option<f64>,
    pub best_improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub run_id: String,
    /// Analysis mode of the run, e.g. `structured`.
    pub variant: String,
    pub dataset: String,
    /// Records with at least one journal line.
    pub record_count: usize,
    pub metrics: Vec<MetricSummary>,
    /// Stop reasons by name; unfinished records count as `incomplete`.
    pub stop_reasons: BTreeMap<String, usize>,
}

impl AggregateReport {
    pub fn metric(&self, kind: MetricKind) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == kind)
    }
}

/// `(value - baseline) / baseline * 100`, undefined for a zero baseline.
pub fn relative_improvement(value: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 {
        None
    } else {
        Some((value - baseline) / baseline * 100.0)
    }
}

/// Per-iteration means over ragged series. A series shorter than the
/// longest one repeats its last value.
pub fn carry_forward_means(series: &[Vec<f64>]) -> Vec<f64> {
    let series: Vec<&Vec<f64>> = series.iter().filter(|s| !s.is_empty()).collect();
    let len = series.iter().map(|s| s.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let sum: f64 = series.iter().map(|s| s[i.min(s.len() - 1)]).sum();
            sum / series.len() as f64
        })
        .collect()
}

fn summarize(metric: MetricKind, series: &[Vec<f64>]) -> Option<MetricSummary> {
    let curve = carry_forward_means(series);
    let baseline = *curve.first()?;
    let final_value = *curve.last()?;
    let (best_iteration, best_value) = curve
        .iter()
        .enumerate()
        .skip(1)
        .fold(None::<(usize, f64)>, |best, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .unwrap_or((0, baseline));
    Some(MetricSummary {
        metric,
        records: series.iter().filter(|s| !s.is_empty()).count(),
        baseline,
        final_value,
        best_value,
        best_iteration: best_iteration as u32,
        final_improvement_pct: relative_improvement(final_value, baseline),
        best_improvement_pct: relative_improvement(best_value, baseline),
        curve,
    })
}

/// Aggregates already-parsed journal contents.
pub fn aggregate_contents(contents: &JournalContents, metrics: &[MetricKind]) -> AggregateReport {
    let header = contents.header.clone();
    let ids = contents.record_ids();
    let mut stop_reasons = BTreeMap::new();
    let mut per_metric: BTreeMap<MetricKind, Vec<Vec<f64>>> = BTreeMap::new();

    for id in &ids {
        let mut entries: Vec<_> = contents.entries_for(id).collect();
        entries.sort_by_key(|e| e.iteration);
        let reason = if contents.error_for(id).is_some() {
            "record_error".to_string()
        } else {
            match entries.last().and_then(|e| e.stop) {
                Some(r) => r.as_str().to_string(),
                None => "incomplete".to_string(),
            }
        };
        *stop_reasons.entry(reason).or_default() += 1;

        for &m in metrics {
            // A skipped value repeats the previous one; a record with no
            // baseline value is left out of this metric.
            let mut values = Vec::with_capacity(entries.len());
            let mut last = None;
            for e in &entries {
                last = e.metrics.get(m).or(last);
                match last {
                    Some(v) => values.push(v),
                    None => break,
                }
            }
            if values.len() == entries.len() {
                per_metric.entry(m).or_default().push(values);
            }
        }
    }

    AggregateReport {
        run_id: header
            .as_ref()
            .map(|h| h.run_id.clone())
            .unwrap_or_default(),
        variant: header
            .as_ref()
            .map(|h| h.baa_mode.as_str().to_string())
            .unwrap_or_default(),
        dataset: header
            .as_ref()
            .map(|h| h.dataset.clone())
            .unwrap_or_default(),
        record_count: ids.len(),
        metrics: metrics
            .iter()
            .filter_map(|m| summarize(*m, per_metric.get(m)?))
            .collect(),
        stop_reasons,
    }
}

/// Reads `journal` (without modifying it) and aggregates the requested
/// metrics.
pub fn aggregate(journal: &Path, metrics: &[MetricKind]) -> Result<AggregateReport, ReportError> {
    let contents = read_journal(journal)?;
    if contents.entries.is_empty() {
        return Err(ReportError::EmptyJournal(journal.display().to_string()));
    }
    Ok(aggregate_contents(&contents, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExportFormat {
    #[default]
    Tsv,
    Csv,
}

impl ExportFormat {
    fn delimiter(self) -> &'static str {
        match self {
            ExportFormat::Tsv => "\t",
            ExportFormat::Csv => ",",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            ExportFormat::Tsv => "tsv",
            ExportFormat::Csv => "csv",
        }
    }
}

/// `"0.30(+50.00%)"`, or `"0.30(undefined)"` against a zero baseline.
pub fn format_cell(value: f64, baseline: f64) -> String {
    match relative_improvement(value, baseline) {
        Some(pct) => format!("{value:.2}({:+.2}%)", pct + 0.0),
        None => format!("{value:.2}(undefined)"),
    }
}

/// `"baseline / variant(±pct%) / ..."`.
pub fn comparison_cell(baseline: f64, variants: &[f64]) -> String {
    std::iter::once(format!("{baseline:.2}"))
        .chain(variants.iter().map(|v| format_cell(*v, baseline)))
        .collect::<Vec<_>>()
        .join(" / ")
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '+' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_file(path: PathBuf, body: String) -> Result<PathBuf, ReportError> {
    fs::write(&path, body).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes one curve file per report, one comparison file across reports
/// grouped by dataset, and `report.json`. Within a dataset the first
/// report's baseline is the comparison baseline. Returns the written paths.
pub fn export_report(
    reports: &[AggregateReport],
    out_dir: &Path,
    format: ExportFormat,
) -> Result<Vec<PathBuf>, ReportError> {
    if reports.is_empty() || reports.iter().all(|r| r.metrics.is_empty()) {
        return Err(ReportError::EmptyReport);
    }
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let d = format.delimiter();
    let ext = format.extension();
    let mut written = Vec::new();

    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    for r in reports {
        let mut stem = format!("curve_{}_{}", file_stem(&r.dataset), file_stem(&r.variant));
        let n = used.entry(stem.clone()).or_default();
        *n += 1;
        if *n > 1 {
            stem = format!("{stem}_{n}");
        }
        let mut body = std::iter::once("iteration".to_string())
            .chain(r.metrics.iter().map(|m| m.metric.as_str().to_string()))
            .collect::<Vec<_>>()
            .join(d);
        body.push('\n');
        let len = r.metrics.iter().map(|m| m.curve.len()).max().unwrap_or(0);
        for i in 0..len {
            let row = std::iter::once(i.to_string())
                .chain(
                    r.metrics
                        .iter()
                        .map(|m| m.curve.get(i).map(|v| v.to_string()).unwrap_or_default()),
                )
                .collect::<Vec<_>>()
                .join(d);
            body.push_str(&row);
            body.push('\n');
        }
        written.push(write_file(out_dir.join(format!("{stem}.{ext}")), body)?);
    }

    let mut datasets: Vec<&str> = Vec::new();
    for r in reports {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let mut body = ["dataset", "metric", "selection", "columns", "table"].join(d);
    body.push('\n');
    for ds in datasets {
        let group: Vec<&AggregateReport> = reports.iter().filter(|r| r.dataset == ds).collect();
        let columns = std::iter::once("baseline")
            .chain(group.iter().map(|r| r.variant.as_str()))
            .collect::<Vec<_>>()
            .join(" / ");
        for kind in MetricKind::ALL {
            let Some(base) = group
                .iter()
                .find_map(|r| r.metric(kind))
                .map(|m| m.baseline)
            else {
                continue;
            };
            for (selection, pick) in [
                ("final", pick_final as fn(&MetricSummary) -> f64),
                ("best", pick_best),
            ] {
                let values: Vec<f64> = group
                    .iter()
                    .map(|r| r.metric(kind).map(pick).unwrap_or(f64::NAN))
                    .collect();
                let row = [
                    ds,
                    kind.as_str(),
                    selection,
                    &columns,
                    &comparison_cell(base, &values),
                ]
                .join(d);
                body.push_str(&row);
                body.push('\n');
            }
        }
    }
    written.push(write_file(out_dir.join(format!("comparison.{ext}")), body)?);

    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    written.push(write_file(out_dir.join("report.json"), json + "\n")?);
    Ok(written)
}

fn pick_final(m: &MetricSummary) -> f64 {
    m.final_value
}

fn pick_best(m: &MetricSummary) -> f64 {
    m.best_value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_examples() {
        assert_eq!(relative_improvement(0.5, 0.5), Some(0.0));
        assert!((relative_improvement(0.3, 0.2).unwrap() - 50.0).abs() < 1e-9);
        assert!((relative_improvement(0.3, 0.4).unwrap() + 25.0).abs() < 1e-9);
        assert_eq!(relative_improvement(0.3, 0.0), None);
    }

    #[test]
    fn cell_formats() {
        assert_eq!(
            comparison_cell(0.2, &[0.3, 0.25]),
            "0.20 / 0.30(+50.00%) / 0.25(+25.00%)"
        );
        assert_eq!(comparison_cell(0.2, &[0.3]), "0.20 / 0.30(+50.00%)");
        assert_eq!(format_cell(0.3, 0.4), "0.30(-25.00%)");
        assert_eq!(format_cell(0.5, 0.5), "0.50(+0.00%)");
        assert_eq!(format_cell(0.5, 0.0), "0.50(undefined)");
    }

    #[test]
    fn carry_forward() {
        let means = carry_forward_means(&[vec![0.1, 0.2], vec![0.4], vec![0.0, 0.3, 0.6]]);
        let expect = [
            (0.1 + 0.4 + 0.0) / 3.0,
            (0.2 + 0.4 + 0.3) / 3.0,
            (0.2 + 0.4 + 0.6) / 3.0,
        ];
        assert_eq!(means.len(), 3);
        for (a, b) in means.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(carry_forward_means(&[]).is_empty());
    }

    #[test]
    fn best_prefers_earliest_maximum_after_baseline() {
        let s = summarize(MetricKind::RougeL, &[vec![0.5, 0.7, 0.7, 0.6]]).unwrap();
        assert_eq!(
            (s.best_iteration, s.best_value, s.final_value),
            (1, 0.7, 0.6)
        );
        let s = summarize(MetricKind::RougeL, &[vec![0.5]]).unwrap();
        assert_eq!((s.best_iteration, s.best_value), (0, 0.5));
    }

    #[test]
    fn empty_export_refused() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_report(&[], dir.path(), ExportFormat::Tsv),
            Err(ReportError::EmptyReport)
        ));
    }
}
