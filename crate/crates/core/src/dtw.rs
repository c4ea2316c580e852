//! Dynamic time warping between cohort-level feature curves, nearest-feature
//! matching for target-private features, and copying of trained GRU channels
//! into a target encoder.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Alignment, Dataset, FeatureSchema, Role};
use crate::encoder::McGruEncoder;
use crate::error::{Error, Result};
use crate::nn::Linear;

/// Default caps used when building representative curves.
pub const MAX_PATIENTS: usize = 500;
pub const MAX_LEN: usize = 64;

/// Full-window DTW with absolute-difference cost.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("dtw sequence".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[j],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = (x - y).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Cohort-level curve of one feature: the per-step mean across patients.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeSeries {
    pub feature: String,
    pub values: Vec<f64>,
    /// Number of patients contributing at each step.
    pub support: Vec<usize>,
}

/// Per-step mean of `feature` over (a seeded subsample of at most
/// `max_patients`) patients, truncated to `max_len` steps. Values are used as
/// stored, so `ds` should already be normalised.
pub fn representative_series(
    ds: &Dataset,
    feature: &str,
    max_patients: usize,
    max_len: usize,
    seed: u64,
) -> Result<RepresentativeSeries> {
    if !ds.schema.contains(feature) {
        return Err(Error::MissingFeature(feature.to_string()));
    }
    if max_patients == 0 || max_len == 0 {
        return Err(Error::Config("representative series caps must be positive".into()));
    }
    let mut seqs: Vec<&[f64]> = ds
        .records
        .iter()
        .filter_map(|r| r.series.get(feature))
        .filter(|s| !s.is_empty())
        .map(|s| s.values.as_slice())
        .collect();
    if seqs.is_empty() {
        return Err(Error::EmptyDataset(format!("no observations of `{feature}`")));
    }
    if seqs.len() > max_patients {
        seqs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        seqs.truncate(max_patients);
    }
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).min(max_len);
    let mut sums = vec![0.0; len];
    let mut support = vec![0usize; len];
    for s in &seqs {
        for (t, v) in s.iter().take(len).enumerate() {
            sums[t] += v;
            support[t] += 1;
        }
    }
    Ok(RepresentativeSeries {
        feature: feature.to_string(),
        values: sums.iter().zip(&support).map(|(s, &n)| s / n as f64).collect(),
        support,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferEntry {
    pub target: String,
    pub source: String,
    pub distance: f64,
    pub role: Role,
}

/// Source channel chosen for every target feature, in target schema order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferMap {
    pub entries: Vec<TransferEntry>,
}

impl TransferMap {
    pub fn source_for(&self, target: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.target == target).map(|e| e.source.as_str())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["target_feature", "source_feature", "dtw_distance", "tag"])?;
        for e in &self.entries {
            let tag = match e.role {
                Role::Shared => "shared",
                Role::Private => "private",
            };
            w.write_record([e.target.as_str(), e.source.as_str(), &e.distance.to_string(), tag])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Config(format!("{}: {other:?}", path.display())),
        })?;
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bad = |reason: &str| Error::MalformedRow {
                path: path.to_path_buf(),
                line: rec.position().map_or(0, |p| p.line()),
                reason: reason.to_string(),
            };
            if rec.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            let role = match &rec[3] {
                "shared" => Role::Shared,
                "private" => Role::Private,
                _ => return Err(bad("tag must be shared or private")),
            };
            entries.push(TransferEntry {
                target: rec[0].to_string(),
                source: rec[1].to_string(),
                distance: rec[2].parse().map_err(|_| bad("distance is not a number"))?,
                role,
            });
        }
        Ok(Self { entries })
    }
}

/// Maps each target-private curve to the closest source curve. Ties go to
/// the earlier source.
pub fn match_private_features(
    target_privates: &[RepresentativeSeries],
    sources: &[RepresentativeSeries],
) -> Result<Vec<TransferEntry>> {
    if sources.is_empty() {
        return Err(Error::Empty("source feature list".into()));
    }
    target_privates
        .par_iter()
        .map(|t| {
            let dists = sources
                .iter()
                .map(|s| dtw_distance(&t.values, &s.values))
                .collect::<Result<Vec<_>>>()?;
            let best = (0..dists.len()).fold(0, |b, i| if dists[i] < dists[b] { i } else { b });
            Ok(TransferEntry {
                target: t.feature.clone(),
                source: sources[best].feature.clone(),
                distance: dists[best],
                role: Role::Private,
            })
        })
        .collect()
}

/// Builds the full map: shared features to their namesakes, private target
/// features to their DTW-nearest source feature. Both datasets should be
/// normalised.
pub fn build_transfer_map(
    source: &Dataset,
    target: &Dataset,
    alignment: &Alignment,
    seed: u64,
) -> Result<TransferMap> {
    let curve = |ds: &Dataset, f: &str| representative_series(ds, f, MAX_PATIENTS, MAX_LEN, seed);
    let sources = source
        .schema
        .names()
        .iter()
        .map(|f| curve(source, f))
        .collect::<Result<Vec<_>>>()?;
    let privates = alignment
        .target_private
        .iter()
        .map(|f| curve(target, f))
        .collect::<Result<Vec<_>>>()?;
    let matched = match_private_features(&privates, &sources)?;
    let mut entries = Vec::with_capacity(target.schema.len());
    for f in target.schema.names() {
        if alignment.shared.contains(f) {
            let s = sources
                .iter()
                .find(|s| &s.feature == f)
                .ok_or_else(|| Error::MissingFeature(f.clone()))?;
            entries.push(TransferEntry {
                target: f.clone(),
                source: f.clone(),
                distance: dtw_distance(&curve(target, f)?.values, &s.values)?,
                role: Role::Shared,
            });
        } else {
            let e = matched
                .iter()
                .find(|e| &e.target == f)
                .ok_or_else(|| Error::UnmappedFeature(f.clone()))?;
            entries.push(e.clone());
        }
    }
    Ok(TransferMap { entries })
}

/// Target encoder whose channel `i` is a copy of the transition channel the
/// map assigns to target feature `i`. The projection is freshly initialised
/// from `rng` because its input width depends on the target feature count.
pub fn transfer_parameters(
    transition: &McGruEncoder,
    map: &TransferMap,
    target_schema: &FeatureSchema,
    rng: &mut impl Rng,
) -> Result<McGruEncoder> {
    let channels = target_schema
        .names()
        .iter()
        .map(|f| {
            let src = map.source_for(f).ok_or_else(|| Error::UnmappedFeature(f.clone()))?;
            transition
                .channel(src)
                .cloned()
                .ok_or_else(|| Error::MissingSourceChannel(src.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let projection = Linear::init(target_schema.len() * transition.hidden(), transition.rep_size(), rng);
    McGruEncoder::new(target_schema.names().to_vec(), channels, projection)
}
