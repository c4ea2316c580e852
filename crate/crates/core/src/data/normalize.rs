//! Forward-fill imputation and z-score normalisation.

use std::collections::{BTreeMap, BTreeSet};

use super::{Dataset, PatientRecord, Series};
use crate::error::{Error, Result};

/// Standard deviations below this are replaced by it.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-feature mean and population standard deviation of observed values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormStats {
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    /// Features with no observations at all in the statistics source. They
    /// are emitted as all-zero sequences.
    pub all_missing: Vec<String>,
}

impl NormStats {
    pub fn z(&self, feature: &str, v: f64) -> f64 {
        match (self.mean.get(feature), self.std.get(feature)) {
            (Some(m), Some(s)) => (v - m) / s.max(STD_FLOOR),
            _ => 0.0,
        }
    }
}

/// Statistics over every observed value of each schema feature.
pub fn compute_stats(ds: &Dataset) -> Result<NormStats> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("normalisation statistics source".into()));
    }
    let mut stats = NormStats::default();
    for feature in ds.schema.names() {
        let values: Vec<f64> = ds
            .records
            .iter()
            .filter_map(|r| r.series.get(feature))
            .flat_map(|s| s.values.iter().copied())
            .collect();
        if values.is_empty() {
            stats.all_missing.push(feature.clone());
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        stats.mean.insert(feature.clone(), mean);
        stats.std.insert(feature.clone(), var.sqrt());
    }
    if !stats.all_missing.is_empty() {
        log::warn!("features with no observations: {}", stats.all_missing.join(", "));
    }
    Ok(stats)
}

/// Imputes and normalises `ds` using statistics computed on `stats_source`.
pub fn impute_and_normalize(ds: &Dataset, stats_source: &Dataset) -> Result<Dataset> {
    let stats = compute_stats(stats_source)?;
    Ok(apply_normalization(ds, &stats))
}

/// Places every schema feature of every patient on the patient's time grid
/// (the union of its observation times), forward-fills gaps, fills leading
/// gaps with the feature mean, then z-scores.
pub fn apply_normalization(ds: &Dataset, stats: &NormStats) -> Dataset {
    let records = ds.records.iter().map(|r| normalize_record(r, ds, stats)).collect();
    Dataset {
        schema: ds.schema.clone(),
        records,
        stats: Some(stats.clone()),
    }
}

fn normalize_record(r: &PatientRecord, ds: &Dataset, stats: &NormStats) -> PatientRecord {
    let grid: Vec<u32> = r
        .series
        .values()
        .flat_map(|s| s.times.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut series = BTreeMap::new();
    for feature in ds.schema.names() {
        let values = match stats.mean.get(feature) {
            None => vec![0.0; grid.len()],
            Some(&mean) => {
                let observed = r.series.get(feature);
                let mut out = Vec::with_capacity(grid.len());
                let mut last: Option<f64> = None;
                let mut cursor = 0;
                for &t in &grid {
                    if let Some(s) = observed {
                        if cursor < s.times.len() && s.times[cursor] == t {
                            last = Some(s.values[cursor]);
                            cursor += 1;
                        }
                    }
                    out.push(stats.z(feature, last.unwrap_or(mean)));
                }
                out
            }
        };
        series.insert(
            feature.clone(),
            Series {
                times: grid.clone(),
                values,
            },
        );
    }
    PatientRecord {
        id: r.id.clone(),
        series,
        outcome: r.outcome,
        los: r.los,
    }
}
