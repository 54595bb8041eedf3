//! Accuracy-over-cost series for plotting.

use serde::{Deserialize, Serialize};

use crate::cost::CostReport;
use crate::train::HistoryRecord;

pub const METRICS: [&str; 4] = ["macs", "graph_bytes", "depth", "params"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub output: usize,
    pub metric: String,
    pub value: u64,
    pub miou: f64,
}

/// One row per `(output, metric)`, pairing each output's cost with its
/// mIoU from the last history record. Metrics are taken from the graph
/// truncated after that output.
pub fn report_rows(cost: &CostReport, history: &[HistoryRecord]) -> Result<Vec<ReportRow>, String> {
    let last = history.last().ok_or("history is empty")?;
    if last.miou.len() != cost.outputs.len() {
        return Err(format!(
            "history has {} outputs, cost report has {}",
            last.miou.len(),
            cost.outputs.len()
        ));
    }
    let mut rows = Vec::with_capacity(cost.outputs.len() * METRICS.len());
    for (o, &miou) in cost.outputs.iter().zip(&last.miou) {
        for metric in METRICS {
            let value = match metric {
                "macs" => o.macs,
                "graph_bytes" => o.graph_bytes,
                "depth" => o.depth as u64,
                _ => o.params,
            };
            rows.push(ReportRow {
                output: o.n,
                metric: metric.to_string(),
                value,
                miou,
            });
        }
    }
    Ok(rows)
}
