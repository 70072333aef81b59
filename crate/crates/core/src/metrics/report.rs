use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Median,
    Mean,
}

/// Median or mean of per-split values.
pub fn aggregate_splits(values: &[f64], mode: Aggregation) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("aggregate over no splits".into()));
    }
    Ok(match mode {
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Median => {
            let mut s = values.to_vec();
            s.sort_by(f64::total_cmp);
            let n = s.len();
            if n % 2 == 1 {
                s[n / 2]
            } else {
                0.5 * (s[n / 2 - 1] + s[n / 2])
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub samples: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Metrics for each evaluated split plus their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub checkpoint_id: String,
    pub aggregation: Aggregation,
    pub splits: Vec<SplitMetrics>,
    pub aggregate: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(
        dataset_id: impl Into<String>,
        checkpoint_id: impl Into<String>,
        aggregation: Aggregation,
        splits: Vec<SplitMetrics>,
    ) -> Result<Self> {
        let mut report = Self {
            dataset_id: dataset_id.into(),
            checkpoint_id: checkpoint_id.into(),
            aggregation,
            splits,
            aggregate: BTreeMap::new(),
        };
        report.aggregate = report.recompute_aggregate()?;
        Ok(report)
    }

    /// Aggregates every metric present in all splits.
    pub fn recompute_aggregate(&self) -> Result<BTreeMap<String, f64>> {
        let Some(first) = self.splits.first() else {
            return Ok(BTreeMap::new());
        };
        let mut out = BTreeMap::new();
        for name in first.metrics.keys() {
            let values: Vec<f64> = self
                .splits
                .iter()
                .filter_map(|s| s.metrics.get(name).copied())
                .collect();
            if values.len() == self.splits.len() {
                out.insert(name.clone(), aggregate_splits(&values, self.aggregation)?);
            }
        }
        Ok(out)
    }

    pub fn metric_names(&self) -> Vec<String> {
        self.aggregate.keys().cloned().collect()
    }

    /// CSV: one row per split, then one `aggregate:<mode>` row.
    pub fn to_text(&self) -> String {
        let names = self.metric_names();
        let mut s = String::new();
        let _ = writeln!(s, "# dataset={} checkpoint={}", self.dataset_id, self.checkpoint_id);
        let _ = writeln!(s, "split,samples,{}", names.join(","));
        let fmt_row = |metrics: &BTreeMap<String, f64>| {
            names
                .iter()
                .map(|n| metrics.get(n).map(|v| format!("{v:.6}")).unwrap_or_default())
                .collect::<Vec<_>>()
                .join(",")
        };
        for split in &self.splits {
            let _ = writeln!(s, "{},{},{}", split.split, split.samples, fmt_row(&split.metrics));
        }
        let mode = match self.aggregation {
            Aggregation::Median => "median",
            Aggregation::Mean => "mean",
        };
        let total: usize = self.splits.iter().map(|s| s.samples).sum();
        let _ = writeln!(s, "aggregate:{mode},{total},{}", fmt_row(&self.aggregate));
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `{stem}.csv` and `{stem}.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_text()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}
