//! Training/evaluation metrics log with stable CSV and JSON renditions.
//!
//! CSV columns, exactly and in this order:
//! `round, epoch, split, metric_name, value, seed`.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: u32,
    pub epoch: u32,
    pub split: String,
    pub metric_name: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, round: u32, epoch: u32, split: &str, metric: &str, value: f64, seed: u64) {
        self.rows.push(MetricRow {
            round,
            epoch,
            split: split.to_string(),
            metric_name: metric.to_string(),
            value,
            seed,
        });
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.rows.extend(other.rows);
    }

    /// Last value recorded for a (split, metric) pair.
    pub fn last_value(&self, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric_name == metric)
            .map(|r| r.value)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<MetricsLog> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec.map_err(csv_err)?);
        }
        Ok(MetricsLog { rows })
    }

    /// Summary keyed `split/metric` -> last value, for the JSON sidecar.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for row in &self.rows {
            map.insert(
                format!("{}/{}", row.split, row.metric_name),
                serde_json::json!(row.value),
            );
        }
        serde_json::Value::Object(map)
    }
}

fn csv_err(e: csv::Error) -> crate::DegiaError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => crate::DegiaError::Io(io),
        other => crate::DegiaError::Format(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_schema_and_roundtrip() {
        let mut log = MetricsLog::new();
        log.push(0, 1, "train", "combined_loss", 2.5, 42);
        log.push(1, 0, "test_shift", "accuracy_pct", 61.25, 42);
        let csv = log.to_csv_string().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "round,epoch,split,metric_name,value,seed");
        assert_eq!(lines.next().unwrap(), "0,1,train,combined_loss,2.5,42");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        log.write_csv(&path).unwrap();
        let back = MetricsLog::read_csv(&path).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn identical_logs_serialize_to_identical_bytes() {
        let build = || {
            let mut log = MetricsLog::new();
            log.push(0, 0, "train", "task_loss", 1.0 / 3.0, 7);
            log.push(0, 0, "train", "nll", -1234.567890123, 7);
            log.to_csv_string().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn summary_keeps_last_value_per_key() {
        let mut log = MetricsLog::new();
        log.push(0, 0, "train", "task_loss", 5.0, 1);
        log.push(0, 1, "train", "task_loss", 3.0, 1);
        let s = log.summary_json();
        assert_eq!(s["train/task_loss"], serde_json::json!(3.0));
        assert_eq!(log.last_value("train", "task_loss"), Some(3.0));
    }
}
