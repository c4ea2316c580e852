//! Longitudinal patient records, feature schemas and dataset handling.

mod csv_io;
mod normalize;
mod schema;
pub mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use csv_io::{load_csv, load_schema, write_csv, write_schema, SchemaDecl};
pub use normalize::{apply_normalization, compute_stats, impute_and_normalize, NormStats, STD_FLOOR};
pub use schema::{align_schemas, canonical_name, Alignment, FeatureSchema, Role};
pub use synth::{synth_generate, GeneratorConfig};

use crate::error::{Error, Result};

/// Observations of one feature for one patient, ordered by time index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub times: Vec<u32>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(times: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::LengthMismatch {
                op: "series",
                left: times.len(),
                right: values.len(),
            });
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("series time indices must be strictly increasing".into()));
        }
        Ok(Self { times, values })
    }

    /// Observations at consecutive time steps `0..values.len()`.
    pub fn dense(values: Vec<f64>) -> Self {
        Self {
            times: (0..values.len() as u32).collect(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One admission: per-feature observation sequences plus outcome and
/// length-of-stay labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub series: BTreeMap<String, Series>,
    /// 1 = death, 0 = survival.
    pub outcome: u8,
    /// Length of stay in days.
    pub los: f64,
}

impl PatientRecord {
    pub fn sequence(&self, feature: &str) -> Result<&[f64]> {
        self.series
            .get(feature)
            .filter(|s| !s.is_empty())
            .map(|s| s.values.as_slice())
            .ok_or_else(|| Error::MissingFeature(feature.to_string()))
    }

    pub fn observation_count(&self) -> usize {
        self.series.values().map(Series::len).sum()
    }
}

/// Patient records sharing one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub records: Vec<PatientRecord>,
    /// Statistics used to normalise this dataset, if it has been normalised.
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, records: Vec<PatientRecord>) -> Self {
        Self {
            schema,
            records,
            stats: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            stats: self.stats.clone(),
        }
    }

    /// Records whose id is in `ids`, keeping dataset order.
    pub fn select_ids(&self, ids: &[String]) -> Dataset {
        let wanted: std::collections::BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        Dataset {
            schema: self.schema.clone(),
            records: self
                .records
                .iter()
                .filter(|r| wanted.contains(r.id.as_str()))
                .cloned()
                .collect(),
            stats: self.stats.clone(),
        }
    }

    pub fn with_schema(mut self, schema: FeatureSchema) -> Dataset {
        self.schema = schema;
        self
    }

    /// Splits into (fit, validation): the validation part is the last
    /// `fraction` of patients in an order shuffled with `seed`.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64) * fraction).round() as usize;
        let n_val = n_val.min(self.len().saturating_sub(1));
        let (fit, val) = idx.split_at(self.len() - n_val);
        (self.select(fit), self.select(val))
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.records.iter().map(|r| f64::from(r.outcome)).collect()
    }

    pub fn los(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.los).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            series: BTreeMap::from([("a".to_string(), Series::dense(vec![1.0]))]),
            outcome: 0,
            los: 1.0,
        }
    }

    #[test]
    fn series_requires_increasing_times() {
        assert!(Series::new(vec![0, 2, 1], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Series::new(vec![0, 0], vec![1.0, 2.0]).is_err());
        assert!(Series::new(vec![0, 3], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn validation_split_is_disjoint_and_seeded() {
        let schema = FeatureSchema::new(vec!["a".into()]).unwrap();
        let ds = Dataset::new(schema, (0..10).map(|i| record(&format!("p{i}"))).collect());
        let (fit, val) = ds.split_validation(0.2, 4);
        assert_eq!((fit.len(), val.len()), (8, 2));
        let (fit2, val2) = ds.split_validation(0.2, 4);
        assert_eq!(fit, fit2);
        assert_eq!(val, val2);
        for r in &val.records {
            assert!(!fit.patient_ids().contains(&r.id));
        }
    }

    #[test]
    fn missing_feature_is_named() {
        let r = record("p");
        match r.sequence("b") {
            Err(Error::MissingFeature(name)) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
    }
}
