use serde::Serialize;

use super::run::{EpochMetrics, Evaluation};

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.loss, r.accuracy));
    }
    out
}

/// Summary of one training run, serialised as JSON next to the metrics.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_fingerprint: String,
    pub epochs: usize,
    pub rows: Vec<EpochMetrics>,
    pub final_train: Option<EpochMetrics>,
    pub final_test: Option<Evaluation>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data") + "\n"
    }
}
