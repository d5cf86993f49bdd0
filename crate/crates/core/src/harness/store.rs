use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kinds::Outputs;
use super::{ExperimentConfig, HarnessError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub(crate) const SUMMARY_FILE: &str = "summary.json";

pub(crate) struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: String, bytes: Vec<u8>) -> Self {
        Self { name, bytes }
    }
}

/// CSV with a header row. Numbers use the shortest representation that
/// parses back to the same `f64`.
pub(crate) fn csv_table<I: Iterator<Item = Vec<f64>>>(header: &[String], rows: I) -> Vec<u8> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out.into_bytes()
}

pub(crate) fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    bytes
}

pub(crate) fn unix_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of a completed run. Every other file in the run directory is
/// listed with its checksum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub tool_version: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub files: Vec<FileRecord>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::io(path, e)
}

/// Write all outputs into a staging directory next to `dir`, then move it
/// into place. An existing `dir` is replaced only when it holds a manifest.
pub(crate) fn commit(
    config: &ExperimentConfig,
    dir: &Path,
    outputs: Outputs,
    started: u64,
) -> Result<RunManifest, HarnessError> {
    if dir.exists() && !dir.join(MANIFEST_FILE).is_file() && fs::read_dir(dir).map_err(io(dir))?.next().is_some() {
        return Err(HarnessError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "directory exists and is not a previous run"),
        ));
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io(parent))?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let result = stage(config, &staging, outputs, started).and_then(|manifest| {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io(dir))?;
        }
        fs::rename(&staging, dir).map_err(io(dir))?;
        Ok(manifest)
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn stage(config: &ExperimentConfig, staging: &Path, outputs: Outputs, started: u64) -> Result<RunManifest, HarnessError> {
    if staging.exists() {
        fs::remove_dir_all(staging).map_err(io(staging))?;
    }
    fs::create_dir_all(staging).map_err(io(staging))?;
    let mut files = Vec::new();
    let mut all = outputs.artifacts;
    all.push(Artifact::new(SUMMARY_FILE.into(), json_bytes(&outputs.summary)));
    all.sort_by(|a, b| a.name.cmp(&b.name));
    for a in &all {
        let path = staging.join(&a.name);
        fs::write(&path, &a.bytes).map_err(io(&path))?;
        files.push(FileRecord { path: a.name.clone(), sha256: sha256_hex(&a.bytes), bytes: a.bytes.len() as u64 });
    }
    let manifest = RunManifest {
        kind: config.kind.to_string(),
        schema_version: config.schema_version,
        seed: config.seed,
        config_hash: config.hash(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_ms: started,
        finished_unix_ms: unix_millis(),
        files,
    };
    let path = staging.join(MANIFEST_FILE);
    fs::write(&path, json_bytes(&manifest)).map_err(io(&path))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    /// Manifest parsed and every listed file matches its checksum.
    Complete,
    /// Listed files that are missing or whose contents changed.
    Tampered { files: Vec<String> },
    /// The manifest itself could not be read.
    Corrupt { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub path: PathBuf,
    pub kind: Option<String>,
    pub config_hash: Option<String>,
    #[serde(flatten)]
    pub status: RunStatus,
}

fn inspect(dir: &Path) -> RunSummary {
    let text = match fs::read_to_string(dir.join(MANIFEST_FILE)) {
        Ok(t) => t,
        Err(e) => {
            return RunSummary {
                path: dir.to_path_buf(),
                kind: None,
                config_hash: None,
                status: RunStatus::Corrupt { reason: e.to_string() },
            }
        }
    };
    let manifest: RunManifest = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(e) => {
            return RunSummary {
                path: dir.to_path_buf(),
                kind: None,
                config_hash: None,
                status: RunStatus::Corrupt { reason: e.to_string() },
            }
        }
    };
    let bad: Vec<String> = manifest
        .files
        .iter()
        .filter(|f| match fs::read(dir.join(&f.path)) {
            Ok(bytes) => bytes.len() as u64 != f.bytes || sha256_hex(&bytes) != f.sha256,
            Err(_) => true,
        })
        .map(|f| f.path.clone())
        .collect();
    let status = if bad.is_empty() { RunStatus::Complete } else { RunStatus::Tampered { files: bad } };
    RunSummary { path: dir.to_path_buf(), kind: Some(manifest.kind), config_hash: Some(manifest.config_hash), status }
}

/// Summaries of every run directory directly under `root` (and `root`
/// itself if it is a run), sorted by path. Unreadable manifests are
/// reported, not fatal.
pub fn list_experiments(root: &Path) -> Result<Vec<RunSummary>, HarnessError> {
    let mut out = Vec::new();
    if root.join(MANIFEST_FILE).exists() {
        out.push(inspect(root));
    }
    for entry in fs::read_dir(root).map_err(io(root))? {
        let path = entry.map_err(io(root))?.path();
        let hidden = path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
        if path.is_dir() && !hidden && path.join(MANIFEST_FILE).exists() {
            out.push(inspect(&path));
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips() {
        let header = vec!["t".to_string(), "x".to_string()];
        let bytes = csv_table(&header, vec![vec![0.1, 1e-300], vec![1.0 / 3.0, 12.0]].into_iter());
        let text = String::from_utf8(bytes).unwrap();
        let rows: Vec<Vec<f64>> =
            text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows, vec![vec![0.1, 1e-300], vec![1.0 / 3.0, 12.0]]);
        assert!(text.starts_with("t,x\n0.1,1e-300\n"));
    }
}
