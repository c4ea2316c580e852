//! Long-format CSV ingestion and export.
//!
//! Observations: `patient_id,time_index,feature,value`, one observation per row.
//! Outcomes: `patient_id,outcome,los`.
//! Schema: `{"features": [...]}`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{canonical_name, Dataset, FeatureSchema, PatientRecord, Series};
use crate::error::{Error, Result};

const OBS_HEADER: [&str; 4] = ["patient_id", "time_index", "feature", "value"];
const OUTCOME_HEADER: [&str; 3] = ["patient_id", "outcome", "los"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaDecl {
    pub features: Vec<String>,
}

pub fn load_schema(path: &Path) -> Result<FeatureSchema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let decl: SchemaDecl = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    FeatureSchema::new(decl.features)
}

pub fn write_schema(schema: &FeatureSchema, path: &Path) -> Result<()> {
    let decl = SchemaDecl {
        features: schema.names().to_vec(),
    };
    let text = serde_json::to_string_pretty(&decl)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| malformed(path, 1, e.to_string()))?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(malformed(
            path,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn rows<'a>(path: &Path, rdr: &'a mut csv::Reader<fs::File>) -> impl Iterator<Item = Result<(u64, csv::StringRecord)>> + 'a {
    let path = path.to_path_buf();
    rdr.records().map(move |r| match r {
        Ok(rec) => Ok((rec.position().map_or(0, |p| p.line()), rec)),
        Err(e) => {
            let line = e.position().map_or(0, |p| p.line());
            Err(malformed(&path, line, e.to_string()))
        }
    })
}

fn parse_value(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| malformed(path, line, format!("{what} `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(malformed(path, line, format!("{what} `{field}` is not finite")));
    }
    Ok(v)
}

/// Loads a dataset from an observations file and an outcomes file.
///
/// Records keep the order in which patients first appear in the
/// observations file. Outcome rows for patients without observations are
/// ignored.
pub fn load_csv(observations: &Path, outcomes: &Path, schema: &FeatureSchema) -> Result<Dataset> {
    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut obs: Vec<BTreeMap<String, BTreeMap<u32, f64>>> = Vec::new();

    let mut rdr = reader(observations)?;
    check_header(observations, &mut rdr, &OBS_HEADER)?;
    for row in rows(observations, &mut rdr) {
        let (line, rec) = row?;
        let patient = rec[0].trim();
        if patient.is_empty() {
            return Err(malformed(observations, line, "empty patient_id"));
        }
        let time: u32 = rec[1]
            .trim()
            .parse()
            .map_err(|_| malformed(observations, line, format!("time_index `{}` is not a non-negative integer", &rec[1])))?;
        let feature = canonical_name(&rec[2]);
        if !schema.contains(&feature) {
            return Err(malformed(observations, line, format!("feature `{feature}` is not in the schema")));
        }
        let value = parse_value(observations, line, &rec[3], "value")?;
        let slot = *index.entry(patient.to_string()).or_insert_with(|| {
            order.push(patient.to_string());
            obs.push(BTreeMap::new());
            obs.len() - 1
        });
        let series = obs[slot].entry(feature.clone()).or_default();
        if series.insert(time, value).is_some() {
            return Err(Error::DuplicateObservation {
                path: observations.to_path_buf(),
                line,
                patient: patient.to_string(),
                time,
                feature,
            });
        }
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset(observations.display().to_string()));
    }

    let mut labels: HashMap<String, (u8, f64)> = HashMap::new();
    let mut rdr = reader(outcomes)?;
    check_header(outcomes, &mut rdr, &OUTCOME_HEADER)?;
    for row in rows(outcomes, &mut rdr) {
        let (line, rec) = row?;
        let patient = rec[0].trim().to_string();
        let outcome = match rec[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(malformed(outcomes, line, format!("outcome `{other}` is not 0 or 1"))),
        };
        let los = parse_value(outcomes, line, &rec[2], "los")?;
        if los < 0.0 {
            return Err(malformed(outcomes, line, format!("los {los} is negative")));
        }
        if labels.insert(patient.clone(), (outcome, los)).is_some() {
            return Err(malformed(outcomes, line, format!("duplicate outcome row for `{patient}`")));
        }
    }

    let mut records = Vec::with_capacity(order.len());
    for (id, series) in order.into_iter().zip(obs) {
        let &(outcome, los) = labels.get(&id).ok_or_else(|| Error::MissingLabel(id.clone()))?;
        let series = series
            .into_iter()
            .map(|(f, points)| {
                let (times, values) = points.into_iter().unzip();
                (f, Series { times, values })
            })
            .collect();
        records.push(PatientRecord {
            id,
            series,
            outcome,
            los,
        });
    }
    Ok(Dataset::new(schema.clone(), records))
}

/// Writes a dataset in the format [`load_csv`] reads. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv(ds: &Dataset, observations: &Path, outcomes: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(observations).map_err(|e| csv_io_error(observations, e))?;
    w.write_record(OBS_HEADER)?;
    for r in &ds.records {
        for feature in ds.schema.names() {
            let Some(series) = r.series.get(feature) else {
                continue;
            };
            for (t, v) in series.times.iter().zip(&series.values) {
                w.write_record([r.id.as_str(), &t.to_string(), feature, &format!("{v}")])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(observations, e))?;

    let mut w = csv::Writer::from_path(outcomes).map_err(|e| csv_io_error(outcomes, e))?;
    w.write_record(OUTCOME_HEADER)?;
    for r in &ds.records {
        w.write_record([r.id.as_str(), &r.outcome.to_string(), &format!("{}", r.los)])?;
    }
    w.flush().map_err(|e| Error::io(outcomes, e))?;
    Ok(())
}

fn csv_io_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec!["HR".into(), "wbc".into()]).unwrap()
    }

    const OUTCOMES: &str = "patient_id,outcome,los\np1,0,3.5\np2,1,10\n";

    #[test]
    fn loads_two_patient_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(
            dir.path(),
            "obs.csv",
            "patient_id,time_index,feature,value\np1,0,HR,80\np1,2,hr,82.5\np2,1,WBC,7\np1,1,wbc,6.1\n",
        );
        let out = write(dir.path(), "out.csv", OUTCOMES);
        let ds = load_csv(&obs, &out, &schema()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records.iter().map(|r| r.observation_count()).sum::<usize>(), 4);
        let p1 = &ds.records[0];
        assert_eq!(p1.id, "p1");
        assert_eq!(p1.series["hr"].times, vec![0, 2]);
        assert_eq!(p1.series["hr"].values, vec![80.0, 82.5]);
        assert_eq!(ds.records[1].outcome, 1);
        assert_eq!(ds.records[1].los, 10.0);
    }

    #[test]
    fn non_numeric_value_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(
            dir.path(),
            "obs.csv",
            "patient_id,time_index,feature,value\np1,0,hr,80\np1,1,hr,abc\n",
        );
        let out = write(dir.path(), "out.csv", OUTCOMES);
        match load_csv(&obs, &out, &schema()) {
            Err(Error::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_observation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(
            dir.path(),
            "obs.csv",
            "patient_id,time_index,feature,value\np1,0,hr,80\np1,0,HR,81\n",
        );
        let out = write(dir.path(), "out.csv", OUTCOMES);
        assert!(matches!(
            load_csv(&obs, &out, &schema()),
            Err(Error::DuplicateObservation { line: 3, .. })
        ));
    }

    #[test]
    fn empty_data_file_is_empty_dataset_error() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(dir.path(), "obs.csv", "patient_id,time_index,feature,value\n");
        let out = write(dir.path(), "out.csv", OUTCOMES);
        assert!(matches!(load_csv(&obs, &out, &schema()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn missing_label_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(dir.path(), "obs.csv", "patient_id,time_index,feature,value\np3,0,hr,1\n");
        let out = write(dir.path(), "out.csv", OUTCOMES);
        assert!(matches!(load_csv(&obs, &out, &schema()), Err(Error::MissingLabel(p)) if p == "p3"));
    }

    #[test]
    fn missing_outcomes_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(dir.path(), "obs.csv", "patient_id,time_index,feature,value\np1,0,hr,1\n");
        let err = load_csv(&obs, &dir.path().join("nope.csv"), &schema()).unwrap_err();
        assert!(err.to_string().contains("nope.csv"));
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(dir.path(), "obs.csv", "id,t,f,v\np1,0,hr,1\n");
        let out = write(dir.path(), "out.csv", OUTCOMES);
        assert!(matches!(load_csv(&obs, &out, &schema()), Err(Error::MalformedRow { line: 1, .. })));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(
            dir.path(),
            "obs.csv",
            "patient_id,time_index,feature,value\np2,0,hr,0.1\np1,3,wbc,-0.30000000000000004\np1,0,hr,1e-300\n",
        );
        let out = write(dir.path(), "out.csv", OUTCOMES);
        let ds = load_csv(&obs, &out, &schema()).unwrap();
        let (o2, u2) = (dir.path().join("o2.csv"), dir.path().join("u2.csv"));
        write_csv(&ds, &o2, &u2).unwrap();
        let back = load_csv(&o2, &u2, &schema()).unwrap();
        assert_eq!(back, ds);
        let s = dir.path().join("schema.json");
        write_schema(&ds.schema, &s).unwrap();
        assert_eq!(load_schema(&s).unwrap(), ds.schema);
    }
}
