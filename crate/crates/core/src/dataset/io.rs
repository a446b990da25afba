use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ingest_measurements, CandidateSet};
use crate::error::{Error, Result};
use crate::plan_ir::{parse_plan_value, plan_to_value};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    format_version: u32,
    query_id: String,
    plans: Vec<Value>,
    latency_runs_ms: Vec<Vec<f64>>,
    cbo_index: usize,
    // Accepted for compatibility with files that carry derived fields;
    // never read back.
    #[allow(dead_code)]
    #[serde(default, skip_serializing)]
    mean_latency_ms: Option<Value>,
    #[allow(dead_code)]
    #[serde(default, skip_serializing)]
    true_ranks: Option<Value>,
}

fn to_line(cs: &CandidateSet) -> DatasetLine {
    DatasetLine {
        format_version: DATASET_FORMAT_VERSION,
        query_id: cs.query_id().to_string(),
        plans: cs.plans().iter().map(plan_to_value).collect(),
        latency_runs_ms: cs.latency_runs_ms().to_vec(),
        cbo_index: cs.cbo_index(),
        mean_latency_ms: None,
        true_ranks: None,
    }
}

fn from_line(line: DatasetLine) -> Result<CandidateSet> {
    if line.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_FORMAT_VERSION,
            found: line.format_version,
        });
    }
    let plans = line
        .plans
        .iter()
        .map(|v| parse_plan_value(v).map(|p| p.plan))
        .collect::<Result<Vec<_>>>()?;
    // means and ranks are always recomputed from the runs
    ingest_measurements(line.query_id, plans, line.latency_runs_ms, line.cbo_index)
}

/// Serializes one candidate set as a single JSON line (no trailing newline).
pub fn candidate_set_to_json(cs: &CandidateSet) -> String {
    serde_json::to_string(&to_line(cs)).expect("dataset lines serialize")
}

pub fn candidate_set_from_json(text: &str) -> Result<CandidateSet> {
    let line: DatasetLine = serde_json::from_str(text)?;
    from_line(line)
}

pub fn write_dataset(path: &Path, data: &[CandidateSet]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for cs in data {
        writeln!(w, "{}", candidate_set_to_json(cs)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<CandidateSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(candidate_set_from_json)
        .collect()
}

/// Reads a file holding exactly one candidate set.
pub fn read_candidate_set(path: &Path) -> Result<CandidateSet> {
    let mut sets = read_dataset(path)?;
    match sets.len() {
        1 => Ok(sets.remove(0)),
        n => Err(Error::LengthMismatch(format!(
            "{} holds {n} candidate sets, expected 1",
            path.display()
        ))),
    }
}

/// Query ids on each side of a train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub format_version: u32,
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn build(data: &[CandidateSet], ratio: f64, seed: u64) -> Result<SplitManifest> {
        let (train, test) = super::split_indices(data.len(), ratio, seed)?;
        let ids = |idx: Vec<usize>| idx.into_iter().map(|i| data[i].query_id().to_string()).collect();
        Ok(SplitManifest {
            format_version: DATASET_FORMAT_VERSION,
            seed,
            ratio,
            train: ids(train),
            test: ids(test),
        })
    }

    /// Selects the named queries from `data`, in manifest order.
    pub fn select(&self, data: &[CandidateSet], ids: &[String]) -> Result<Vec<CandidateSet>> {
        ids.iter()
            .map(|id| {
                data.iter()
                    .find(|cs| cs.query_id() == id)
                    .cloned()
                    .ok_or_else(|| Error::MissingQuery(id.clone()))
            })
            .collect()
    }

    pub fn train_sets(&self, data: &[CandidateSet]) -> Result<Vec<CandidateSet>> {
        self.select(data, &self.train)
    }

    pub fn test_sets(&self, data: &[CandidateSet]) -> Result<Vec<CandidateSet>> {
        self.select(data, &self.test)
    }
}

pub fn write_split(path: &Path, manifest: &SplitManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: SplitManifest = serde_json::from_str(&text)?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_FORMAT_VERSION,
            found: m.format_version,
        });
    }
    Ok(m)
}
