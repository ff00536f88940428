//! Report bundles and their on-disk form: `metrics.csv` (one row per run,
//! benchmark and metric), `curves.csv` (loss per step), static SVG plots and
//! a metadata sidecar. Every value is checked for NaN before anything hits
//! disk; a NaN fails the run loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("NaN in report: {0}")]
    NaN(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub benchmark: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub run_id: String,
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    /// Wall time lives only in the metadata sidecar so metric files stay
    /// byte-reproducible.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ReportBundle {
    pub rows: Vec<MetricRow>,
    pub curves: Vec<CurvePoint>,
    pub meta: Vec<RunMeta>,
}

impl ReportBundle {
    pub fn merge(&mut self, other: ReportBundle) {
        self.rows.extend(other.rows);
        self.curves.extend(other.curves);
        self.meta.extend(other.meta);
    }

    pub fn check_finite(&self) -> Result<(), ReportError> {
        for r in &self.rows {
            if !r.value.is_finite() {
                return Err(ReportError::NaN(format!("{}/{}/{}", r.run_id, r.benchmark, r.metric)));
            }
        }
        for c in &self.curves {
            if !c.loss.is_finite() {
                return Err(ReportError::NaN(format!("{} step {}", c.run_id, c.step)));
            }
        }
        Ok(())
    }

    /// Metric value for a `(run_id, benchmark, metric)` triple.
    pub fn value(&self, run_id: &str, benchmark: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.run_id == run_id && r.benchmark == benchmark && r.metric == metric)
            .map(|r| r.value)
    }
}

/// Writes `metrics.csv`, `curves.csv`, `run_meta.json` and the plots under
/// `dir`. Returns the emitted file names.
pub fn report_emit(bundle: &ReportBundle, dir: &Path) -> Result<Vec<String>, ReportError> {
    bundle.check_finite()?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let metrics_path = dir.join("metrics.csv");
    {
        let mut w = csv::Writer::from_path(&metrics_path)?;
        w.write_record(["run_id", "benchmark", "metric", "value", "seed", "config_hash"])?;
        for r in &bundle.rows {
            w.write_record([
                r.run_id.as_str(),
                r.benchmark.as_str(),
                r.metric.as_str(),
                &format_value(r.value),
                &r.seed.to_string(),
                r.config_hash.as_str(),
            ])?;
        }
        w.flush()?;
    }
    written.push("metrics.csv".to_string());

    let curves_path = dir.join("curves.csv");
    {
        let mut w = csv::Writer::from_path(&curves_path)?;
        w.write_record(["run_id", "step", "loss"])?;
        for c in &bundle.curves {
            w.write_record([c.run_id.as_str(), &c.step.to_string(), &format_value(c.loss)])?;
        }
        w.flush()?;
    }
    written.push("curves.csv".to_string());

    std::fs::write(
        dir.join("run_meta.json"),
        serde_json::to_string_pretty(&bundle.meta).expect("meta serialises"),
    )?;
    written.push("run_meta.json".to_string());

    if !bundle.curves.is_empty() {
        let by_run = group_curves(bundle);
        let svg = crate::plot::line_chart("training loss", "step", "loss", &by_run);
        std::fs::write(dir.join("loss_curves.svg"), svg)?;
        written.push("loss_curves.svg".to_string());
    }
    Ok(written)
}

fn group_curves(bundle: &ReportBundle) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for c in &bundle.curves {
        match out.iter_mut().find(|(id, _)| id == &c.run_id) {
            Some((_, pts)) => pts.push((c.step as f64, c.loss)),
            None => out.push((c.run_id.clone(), vec![(c.step as f64, c.loss)])),
        }
    }
    out
}

/// Fixed-width float formatting keeps the CSV bytes stable across runs.
pub fn format_value(v: f64) -> String {
    format!("{v:.12e}")
}

/// Parses a previously emitted `metrics.csv` back into rows.
pub fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricRow>, ReportError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(MetricRow {
            run_id: rec[0].to_string(),
            benchmark: rec[1].to_string(),
            metric: rec[2].to_string(),
            value: rec[3].parse().unwrap_or(f64::NAN),
            seed: rec[4].parse().unwrap_or(0),
            config_hash: rec[5].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_bundle() -> ReportBundle {
        ReportBundle {
            rows: vec![
                MetricRow {
                    run_id: "a".into(),
                    benchmark: "vos_knn".into(),
                    metric: "jf".into(),
                    value: 0.731,
                    seed: 3,
                    config_hash: "abc".into(),
                },
                MetricRow {
                    run_id: "b".into(),
                    benchmark: "vos_knn".into(),
                    metric: "jf".into(),
                    value: 0.5,
                    seed: 4,
                    config_hash: "def".into(),
                },
            ],
            curves: vec![CurvePoint { run_id: "a".into(), step: 1, loss: 0.9 }],
            meta: vec![],
        }
    }

    #[test]
    fn emit_and_parse_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = sample_bundle();
        let files = report_emit(&bundle, dir.path()).unwrap();
        assert!(files.contains(&"metrics.csv".to_string()));
        let rows = parse_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].run_id, "a");
        assert!((rows[0].value - 0.731).abs() < 1e-15);
        // Two runs on the same benchmark keep distinct run ids.
        assert_ne!(rows[0].run_id, rows[1].run_id);
    }

    #[test]
    fn empty_benchmark_list_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = ReportBundle::default();
        report_emit(&bundle, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text.trim(), "run_id,benchmark,metric,value,seed,config_hash");
    }

    #[test]
    fn nan_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = sample_bundle();
        bundle.rows[0].value = f64::NAN;
        assert!(matches!(report_emit(&bundle, dir.path()), Err(ReportError::NaN(_))));
    }
}
