//! Metric reports: per-fold values plus aggregate mean and standard
//! deviation, serialized as versioned JSON. Values are fractions in
//! [0,1]; presentation as percentages happens at display time only.

use std::collections::BTreeMap;
use std::path::Path;

use indret_core::evalkit::Aggregate;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricAggregate {
    pub mean: f64,
    pub std: f64,
}

impl From<Aggregate> for MetricAggregate {
    fn from(a: Aggregate) -> Self {
        MetricAggregate {
            mean: a.mean,
            std: a.std,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub format_version: u32,
    /// Metric name -> value per fold (single-element when not folded).
    pub per_fold: BTreeMap<String, Vec<f64>>,
    /// Metric name -> mean and std over folds.
    pub aggregate: BTreeMap<String, MetricAggregate>,
}

impl MetricReport {
    pub fn new() -> Self {
        MetricReport {
            format_version: FORMAT_VERSION,
            per_fold: BTreeMap::new(),
            aggregate: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, fold_values: Vec<f64>) -> Result<()> {
        let agg = indret_core::evalkit::mean_std(&fold_values).map_err(AppError::Core)?;
        self.per_fold.insert(name.to_string(), fold_values);
        self.aggregate.insert(name.to_string(), agg.into());
        Ok(())
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.aggregate.get(name).map(|a| a.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| AppError::Persistence(e.to_string()))
    }

    /// Human-readable percentage table, `mean±std` per metric.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, agg) in &self.aggregate {
            out.push_str(&format!(
                "{name}: {:.2}\u{b1}{:.2}\n",
                agg.mean * 100.0,
                agg.std * 100.0
            ));
        }
        out
    }
}

impl Default for MetricReport {
    fn default() -> Self {
        Self::new()
    }
}

pub fn save(path: &Path, report: &MetricReport) -> Result<()> {
    std::fs::write(path, report.to_json()?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path)?;
    let report: MetricReport =
        serde_json::from_str(&text).map_err(|e| AppError::Validation(e.to_string()))?;
    if report.format_version != FORMAT_VERSION {
        return Err(AppError::Validation(format!(
            "unsupported report format_version {}",
            report.format_version
        )));
    }
    Ok(report)
}
