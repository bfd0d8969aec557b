//! Result records and their line-delimited and tabular encodings.

use crate::CliError;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// One output row: a replica of a grid point, or a grid-point summary when
/// `replica` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub kind: String,
    pub grid_index: usize,
    pub replica: Option<u64>,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    pub outputs: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
    /// Seconds; the only field that differs between identical runs.
    pub wall_time: f64,
}

impl ResultRecord {
    pub fn new(
        experiment: &str,
        kind: &str,
        grid_index: usize,
        replica: Option<u64>,
        seed: u64,
    ) -> Self {
        ResultRecord {
            experiment: experiment.to_string(),
            kind: kind.to_string(),
            grid_index,
            replica,
            seed,
            params: BTreeMap::new(),
            outputs: BTreeMap::new(),
            flags: BTreeMap::new(),
            wall_time: 0.0,
        }
    }

    /// Stores a scalar output; non-finite values are dropped so that every
    /// record stays representable as JSON.
    pub fn out(&mut self, name: &str, v: f64) -> &mut Self {
        if v.is_finite() {
            self.outputs.insert(name.to_string(), v);
        }
        self
    }

    pub fn flag(&mut self, name: &str, v: bool) -> &mut Self {
        self.flags.insert(name.to_string(), v);
        self
    }

    /// Copy with the wall time zeroed, for reproducibility comparisons.
    pub fn without_wall_time(&self) -> Self {
        ResultRecord {
            wall_time: 0.0,
            ..self.clone()
        }
    }

    fn sort_key(&self) -> (usize, u64, u64) {
        match self.replica {
            Some(r) => (self.grid_index, 0, r),
            None => (self.grid_index, 1, 0),
        }
    }
}

/// Orders records by grid point, replicas first, then the summary.
pub fn sort_records(records: &mut [ResultRecord]) {
    records.sort_by_key(|r| r.sort_key());
}

/// Writes one JSON object per line, flushing after each.
pub fn write_jsonl(path: &Path, records: &[ResultRecord]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| CliError::Io(e.to_string()))?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ResultRecord>, CliError> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
        })
        .collect()
}

const FIXED: [&str; 6] = [
    "experiment",
    "kind",
    "grid_index",
    "replica",
    "seed",
    "wall_time",
];

fn header(records: &[ResultRecord]) -> Vec<String> {
    let mut params = BTreeSet::new();
    let mut outs = BTreeSet::new();
    let mut flags = BTreeSet::new();
    for r in records {
        params.extend(r.params.keys().cloned());
        outs.extend(r.outputs.keys().cloned());
        flags.extend(r.flags.keys().cloned());
    }
    let mut h: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    h.extend(params.into_iter().map(|k| format!("param.{k}")));
    h.extend(outs.into_iter().map(|k| format!("out.{k}")));
    h.extend(flags.into_iter().map(|k| format!("flag.{k}")));
    h
}

/// Tidy CSV, one row per record. Columns are the fixed fields followed by
/// `param.*`, `out.*` and `flag.*` in sorted order; absent values are empty.
pub fn write_csv(path: &Path, records: &[ResultRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.to_string()))?;
    let h = header(records);
    w.write_record(&h)
        .map_err(|e| CliError::Io(e.to_string()))?;
    for r in records {
        let row: Vec<String> = h
            .iter()
            .map(|col| match col.as_str() {
                "experiment" => r.experiment.clone(),
                "kind" => r.kind.clone(),
                "grid_index" => r.grid_index.to_string(),
                "replica" => r.replica.map(|v| v.to_string()).unwrap_or_default(),
                "seed" => r.seed.to_string(),
                "wall_time" => r.wall_time.to_string(),
                c => {
                    if let Some(k) = c.strip_prefix("param.") {
                        r.params.get(k).map(|v| v.to_string()).unwrap_or_default()
                    } else if let Some(k) = c.strip_prefix("out.") {
                        r.outputs.get(k).map(|v| v.to_string()).unwrap_or_default()
                    } else {
                        let k = c.strip_prefix("flag.").unwrap();
                        r.flags.get(k).map(|v| v.to_string()).unwrap_or_default()
                    }
                }
            })
            .collect();
        w.write_record(&row)
            .map_err(|e| CliError::Io(e.to_string()))?;
        w.flush()?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a file written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<ResultRecord>, CliError> {
    let io = |e: &dyn std::fmt::Display| CliError::Io(format!("{}: {e}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(|e| io(&e))?;
    let h: Vec<String> = rd
        .headers()
        .map_err(|e| io(&e))?
        .iter()
        .map(String::from)
        .collect();
    let num = |s: &str| s.parse::<f64>().map_err(|e| io(&e));
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| io(&e))?;
        let mut r = ResultRecord::new("", "", 0, None, 0);
        for (col, v) in h.iter().zip(row.iter()) {
            match col.as_str() {
                "experiment" => r.experiment = v.to_string(),
                "kind" => r.kind = v.to_string(),
                "grid_index" => r.grid_index = v.parse().map_err(|e| io(&e))?,
                "replica" => {
                    r.replica = if v.is_empty() {
                        None
                    } else {
                        Some(v.parse().map_err(|e| io(&e))?)
                    }
                }
                "seed" => r.seed = v.parse().map_err(|e| io(&e))?,
                "wall_time" => r.wall_time = num(v)?,
                _ if v.is_empty() => {}
                c => {
                    if let Some(k) = c.strip_prefix("param.") {
                        r.params.insert(k.to_string(), num(v)?);
                    } else if let Some(k) = c.strip_prefix("out.") {
                        r.outputs.insert(k.to_string(), num(v)?);
                    } else if let Some(k) = c.strip_prefix("flag.") {
                        r.flags
                            .insert(k.to_string(), v.parse().map_err(|e| io(&e))?);
                    } else {
                        return Err(io(&format!("unknown column {c}")));
                    }
                }
            }
        }
        out.push(r);
    }
    Ok(out)
}

/// Provenance written next to the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub kind: String,
    /// SHA-256 of the spec file text.
    pub config_sha256: String,
    pub code_version: String,
    pub master_seed: u64,
    pub replicas: usize,
    pub grid_points: usize,
    pub records: usize,
    /// Horizon per grid point, with its origin (`config` or `pilot`).
    pub horizons: Vec<HorizonEntry>,
    pub failures: Vec<FailureEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonEntry {
    pub grid_index: usize,
    pub horizon: f64,
    pub source: String,
    /// Largest extinction time seen by the pilot, if any pilot replica died out.
    pub pilot_max_extinction: Option<f64>,
    pub pilot_survivors: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub grid_index: usize,
    pub replica: Option<u64>,
    pub message: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<ResultRecord> {
        let mut a = ResultRecord::new("exp, \"quoted\"", "phase_sweep", 0, Some(1), 42);
        a.params.insert("beta".into(), 0.1);
        a.out("density", 1.0 / 3.0)
            .out("nan", f64::NAN)
            .flag("extinct", true);
        let mut b = ResultRecord::new("exp", "phase_sweep", 1, None, 43);
        b.out("fraction", 1e-300);
        b.wall_time = 0.25;
        vec![a, b]
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&p, &sample()).unwrap();
        assert_eq!(read_csv(&p).unwrap(), sample());
        assert!(!sample()[0].outputs.contains_key("nan"));
    }

    #[test]
    fn empty_csv_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&p, &[]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        write_jsonl(&p, &sample()).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), sample());
    }

    #[test]
    fn summaries_sort_after_replicas() {
        let mut v = vec![
            ResultRecord::new("e", "k", 1, Some(0), 0),
            ResultRecord::new("e", "k", 0, None, 0),
            ResultRecord::new("e", "k", 0, Some(3), 0),
            ResultRecord::new("e", "k", 0, Some(1), 0),
        ];
        sort_records(&mut v);
        let keys: Vec<(usize, Option<u64>)> = v.iter().map(|r| (r.grid_index, r.replica)).collect();
        assert_eq!(
            keys,
            vec![(0, Some(1)), (0, Some(3)), (0, None), (1, Some(0))]
        );
    }

    proptest! {
        #[test]
        fn csv_round_trips_arbitrary_values(vals in prop::collection::vec(any::<f64>(), 1..8), flag in any::<bool>()) {
            let mut r = ResultRecord::new("x", "y", 3, Some(9), u64::MAX);
            for (i, v) in vals.iter().enumerate() {
                r.out(&format!("v{i}"), *v);
            }
            r.flag("f", flag);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.csv");
            write_csv(&p, std::slice::from_ref(&r)).unwrap();
            prop_assert_eq!(read_csv(&p).unwrap(), vec![r]);
        }
    }
}
