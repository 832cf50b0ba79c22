use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,split,metric,value";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Per-epoch metrics of one run plus identifying metadata.
///
/// Only the rows go into the metrics CSV, so two runs of the same
/// configuration produce identical files regardless of wall-clock time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub rows: Vec<MetricRow>,
    pub config_hash: String,
    pub provenance: String,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn new(config_hash: impl Into<String>) -> Self {
        let config_hash = config_hash.into();
        Self {
            provenance: format!("mamp-core {} config {config_hash}", env!("CARGO_PKG_VERSION")),
            config_hash,
            ..Self::default()
        }
    }

    /// Appends a row; epochs must not decrease.
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        if let Some(last) = self.rows.last() {
            assert!(epoch >= last.epoch, "metric rows must be monotone in epoch");
        }
        self.rows.push(MetricRow {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        });
    }

    /// Last value recorded for `(split, metric)`.
    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.epoch, r.split, r.metric, r.value).expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses a metrics CSV; errors name the offending line.
    pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<MetricRow>> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == METRICS_HEADER => {}
            _ => return Err(Error::parse(path, 1, format!("expected header {METRICS_HEADER:?}"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::parse(path, i + 1, format!("{msg}: {line:?}"));
            let fields: Vec<&str> = line.split(',').collect();
            let [epoch, split, metric, value] = fields.as_slice() else {
                return Err(bad("expected 4 fields"));
            };
            rows.push(MetricRow {
                epoch: epoch.trim().parse().map_err(|_| bad("bad epoch"))?,
                split: split.trim().to_string(),
                metric: metric.trim().to_string(),
                value: value.trim().parse().map_err(|_| bad("bad value"))?,
            });
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut r = RunRecord::new("abc");
        r.push(0, "train", "loss", 1.25);
        r.push(1, "train", "loss", 0.1 + 0.2);
        r.push(1, "test", "accuracy", 0.5);
        let text = r.to_csv();
        assert!(text.starts_with("epoch,split,metric,value\n0,train,loss,1.25\n"));
        let back = RunRecord::parse_csv(&text, Path::new("m.csv")).unwrap();
        assert_eq!(back, r.rows);
        assert_eq!(r.last("train", "loss"), Some(0.1 + 0.2));
        assert_eq!(r.series("train", "loss").len(), 2);
    }

    #[test]
    #[should_panic(expected = "monotone")]
    fn epochs_must_not_decrease() {
        let mut r = RunRecord::new("x");
        r.push(2, "train", "loss", 1.0);
        r.push(1, "train", "loss", 1.0);
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let err = RunRecord::parse_csv("epoch,split,metric,value\n0,a,b,1\nx,a,b,1\n", Path::new("m.csv"))
            .unwrap_err();
        assert!(err.to_string().starts_with("m.csv:3:"), "{err}");
    }
}
