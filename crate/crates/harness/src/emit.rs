//! Result files: raw rows, aggregates, CDF/CRLB tables and the manifest.
//!
//! Output depends only on the record, so identical runs give identical
//! bytes (no timestamps, no host data).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::record::{Aggregate, CdfPoint, ResultRecord, RunRow};
use crate::spec::ExperimentSpec;
use crate::Result;

pub const ROWS_FILE: &str = "rows.csv";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CDF_FILE: &str = "cdf.csv";
pub const CRLB_FILE: &str = "crlb.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    /// SHA-256 of the compact JSON of the experiment spec.
    pub config_sha256: String,
    pub spec: ExperimentSpec,
    pub seeds: Vec<u64>,
    pub versions: Versions,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    /// Workspace version (core and harness are versioned together).
    pub backsim: String,
    /// Layout version of the files in this directory.
    pub format: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateFile {
    pub experiment: String,
    pub aggregates: Vec<Aggregate>,
    pub curves: Vec<Aggregate>,
}

pub fn config_hash(spec: &ExperimentSpec) -> Result<String> {
    let bytes = serde_json::to_vec(spec)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_rows(path: &Path, rows: &[RunRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_cdf(path: &Path, cdf: &[CdfPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in cdf {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Write every artifact of `record` under `dir` (created if missing) and
/// return the paths written, manifest last.
pub fn emit_results(record: &ResultRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = vec![ROWS_FILE.to_string(), AGGREGATE_FILE.to_string()];
    write_rows(&dir.join(ROWS_FILE), &record.rows)?;
    write_json(
        &dir.join(AGGREGATE_FILE),
        &AggregateFile {
            experiment: record.experiment.clone(),
            aggregates: record.aggregates.clone(),
            curves: record.curves.clone(),
        },
    )?;
    if !record.cdf.is_empty() {
        write_cdf(&dir.join(CDF_FILE), &record.cdf)?;
        files.push(CDF_FILE.into());
    }
    if record.curves.iter().any(|c| c.metric == "r_crlb_total_m") {
        crate::io::write_crlb_csv(&dir.join(CRLB_FILE), &record.curves)?;
        files.push(CRLB_FILE.into());
    }
    let manifest = Manifest {
        experiment: record.experiment.clone(),
        config_sha256: config_hash(&record.spec)?,
        spec: record.spec.clone(),
        seeds: record.seeds.clone(),
        versions: Versions { backsim: env!("CARGO_PKG_VERSION").into(), format: 1 },
        files: files.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    files.push(MANIFEST_FILE.into());
    Ok(files.iter().map(|f| dir.join(f)).collect())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

pub fn read_aggregates(dir: &Path) -> Result<AggregateFile> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(AGGREGATE_FILE))?)?)
}
