//! Experiment reports: typed records, versioned JSON, and deterministic CSV
//! emission.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{ErrorMatrix, MetricRecord};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One point of a sweep curve (robustness, closed-loop, shift).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Curve family, e.g. "fgsm_r2", "noise_r2", "closed_loop_deviation".
    pub curve: String,
    pub strategy: String,
    pub seed: u64,
    pub task: String,
    /// Sweep coordinate (tau, noise level, horizon step, shift magnitude).
    pub x: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMatrixRecord {
    pub strategy: String,
    pub seed: u64,
    pub matrix: ErrorMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport<C> {
    pub schema_version: u32,
    pub tool_version: String,
    /// The exact configuration that produced this report.
    pub config_echo: C,
    pub records: Vec<MetricRecord>,
    pub error_matrices: Vec<ErrorMatrixRecord>,
    pub curves: Vec<CurvePoint>,
    pub wall_clock_seconds: f64,
    /// Set when a cell aborted and the report is incomplete.
    pub partial: bool,
}

impl<C: Serialize> ExperimentReport<C> {
    pub fn new(config_echo: C) -> Self {
        ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_echo,
            records: Vec::new(),
            error_matrices: Vec::new(),
            curves: Vec::new(),
            wall_clock_seconds: 0.0,
            partial: false,
        }
    }

    /// Canonical record order so CSV output is byte-stable.
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| {
            (&a.strategy, a.seed, &a.task, &a.metric)
                .cmp(&(&b.strategy, b.seed, &b.task, &b.metric))
        });
        self.curves.sort_by(|a, b| {
            (&a.curve, &a.strategy, a.seed, &a.task)
                .cmp(&(&b.curve, &b.strategy, b.seed, &b.task))
                .then(a.x.total_cmp(&b.x))
        });
        self.error_matrices
            .sort_by(|a, b| (&a.strategy, a.seed).cmp(&(&b.strategy, b.seed)));
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

/// metrics.csv: run_id,strategy,task,metric,value,seed
pub fn write_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run_id", "strategy", "task", "metric", "value", "seed"])?;
    for r in records {
        w.write_record([
            r.run_id.as_str(),
            r.strategy.as_str(),
            r.task.as_str(),
            r.metric.as_str(),
            &format!("{}", r.value),
            &format!("{}", r.seed),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// curves.csv: curve,strategy,seed,task,x,value
pub fn write_curves_csv(curves: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["curve", "strategy", "seed", "task", "x", "value"])?;
    for c in curves {
        w.write_record([
            c.curve.as_str(),
            c.strategy.as_str(),
            &format!("{}", c.seed),
            c.task.as_str(),
            &format!("{}", c.x),
            &format!("{}", c.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_json<C: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<ExperimentReport<C>> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_csv_deterministic_bytes() {
        let records = vec![
            MetricRecord::new("a-s1", "er", "0", "r2", 0.91234567890123, 1),
            MetricRecord::new("a-s1", "er", "0", "nrmse", 0.0625, 1),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.csv");
        let p2 = dir.path().join("m2.csv");
        write_metrics_csv(&records, &p1).unwrap();
        write_metrics_csv(&records, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.starts_with("run_id,strategy,task,metric,value,seed\n"));
        assert!(text.contains("0.91234567890123"));
    }

    #[test]
    fn test_report_sort_stable() {
        let mut report: ExperimentReport<u32> = ExperimentReport::new(7);
        report.records.push(MetricRecord::new("x", "b", "1", "r2", 0.5, 2));
        report.records.push(MetricRecord::new("x", "a", "1", "r2", 0.5, 1));
        report.sort();
        assert_eq!(report.records[0].strategy, "a");
    }
}
