//! Result tables shared by `ablate` and `report`.

use std::path::Path;

use anyhow::Result;
use owseg_core::ArReport;
use serde::{Deserialize, Serialize};

use crate::manifest::write_json;
use crate::svg::{grouped_bars, Series};

/// Box AR, then mask AR with its threshold and size breakdowns, all at the
/// largest budget.
pub const METRIC_COLUMNS: [&str; 7] = ["AR^box", "AR", "AR_0.5", "AR_0.75", "AR_small", "AR_med", "AR_large"];

pub fn metric_values(box_report: &ArReport, mask_report: &ArReport) -> Vec<Option<f64>> {
    vec![
        box_report.ar,
        mask_report.ar,
        mask_report.ar_50,
        mask_report.ar_75,
        mask_report.ar_small,
        mask_report.ar_medium,
        mask_report.ar_large,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    /// One entry per label column.
    pub labels: Vec<String>,
    /// One entry per metric column; all `None` for failed rows.
    pub metrics: Vec<Option<f64>>,
    #[serde(flatten)]
    pub status: RowStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub label_columns: Vec<String>,
    pub metric_columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn new(title: &str, label_columns: &[&str]) -> Self {
        Table {
            title: title.to_string(),
            label_columns: label_columns.iter().map(|s| s.to_string()).collect(),
            metric_columns: METRIC_COLUMNS.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> Vec<String> {
        self.label_columns.iter().chain(&self.metric_columns).cloned().collect()
    }

    pub fn push_ok(&mut self, labels: Vec<String>, metrics: Vec<Option<f64>>) {
        debug_assert_eq!(metrics.len(), self.metric_columns.len());
        self.rows.push(TableRow { labels, metrics, status: RowStatus::Ok });
    }

    pub fn push_failed(&mut self, labels: Vec<String>, error: String) {
        let metrics = vec![None; self.metric_columns.len()];
        self.rows.push(TableRow { labels, metrics, status: RowStatus::Failed { error } });
    }

    /// Fractions with six decimals; missing values and failed cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = self.columns().join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r
                .labels
                .iter()
                .map(|l| csv_field(l))
                .chain(r.metrics.iter().map(|m| m.map_or_else(String::new, |v| format!("{v:.6}"))))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Percentages with one decimal, the way recall tables are usually printed.
    pub fn to_markdown(&self) -> String {
        let cols = self.columns();
        let mut out = format!("### {}\n\n| {} |\n|{}\n", self.title, cols.join(" | "), "---|".repeat(cols.len()));
        for r in &self.rows {
            let metrics: Vec<String> = match &r.status {
                RowStatus::Ok => r
                    .metrics
                    .iter()
                    .map(|m| m.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v)))
                    .collect(),
                RowStatus::Failed { .. } => vec!["failed".to_string(); r.metrics.len()],
            };
            let cells: Vec<String> = r.labels.iter().cloned().chain(metrics).collect();
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let series: Vec<Series> = self
            .rows
            .iter()
            .map(|r| Series {
                label: r.labels.join(" "),
                values: r.metrics.clone(),
            })
            .collect();
        grouped_bars(&self.title, &self.metric_columns, &series)
    }

    /// Writes `<stem>.csv`, `<stem>.json`, `<stem>.md` and `<stem>.svg` into `dir`.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        write_json(&dir.join(format!("{stem}.json")), self)?;
        std::fs::write(dir.join(format!("{stem}.md")), self.to_markdown())?;
        std::fs::write(dir.join(format!("{stem}.svg")), self.to_svg())?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_rows_keep_the_column_count() {
        let mut t = Table::new("t", &["Method"]);
        t.push_ok(vec!["a".into()], vec![Some(0.5); 7]);
        t.push_failed(vec!["b".into()], "boom".into());
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Method,AR^box,AR,AR_0.5,AR_0.75,AR_small,AR_med,AR_large");
        assert!(lines.iter().all(|l| l.split(',').count() == 8));
        assert!(t.to_markdown().contains("failed"));
        let json = serde_json::to_value(&t).unwrap();
        assert_eq!(json["rows"][1]["status"], "failed");
        assert_eq!(json["rows"][1]["error"], "boom");
    }
}
