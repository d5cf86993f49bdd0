//! Experiment configuration, execution and persistence.
//!
//! A run is described by a TOML file:
//!
//! ```toml
//! kind = "threshold"
//! schema_version = 1
//! seed = 7
//! # output_dir = "runs/threshold-demo"
//!
//! [params]
//! depths = [2, 3, 4]
//! ratios = 4.0
//! s = 0.1
//! f = 0.9
//! ```
//!
//! Every grid cell draws its randomness from the substream `(seed, cell)`,
//! so outputs depend only on the configuration.

mod kinds;
mod store;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use kinds::{
    ConvClassifyParams, DiagClassifyParams, Grid, OmpAgreementParams, QuadraticParams, SensingInit, SensingParams,
    ThresholdMethod, ThresholdParams, ToyFlowParams, ToyGdParams,
};
pub use store::{list_experiments, FileRecord, RunManifest, RunStatus, RunSummary, MANIFEST_FILE};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ToyFlow,
    ToyGd,
    Threshold,
    Sensing,
    Quadratic,
    DiagClassify,
    ConvClassify,
    OmpAgreement,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ToyFlow => "toy-flow",
            Self::ToyGd => "toy-gd",
            Self::Threshold => "threshold",
            Self::Sensing => "sensing",
            Self::Quadratic => "quadratic",
            Self::DiagClassify => "diag-classify",
            Self::ConvClassify => "conv-classify",
            Self::OmpAgreement => "omp-agreement",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of one experiment kind.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Params {
    ToyFlow(ToyFlowParams),
    ToyGd(ToyGdParams),
    Threshold(ThresholdParams),
    Sensing(SensingParams),
    Quadratic(QuadraticParams),
    DiagClassify(DiagClassifyParams),
    ConvClassify(ConvClassifyParams),
    OmpAgreement(OmpAgreementParams),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub schema_version: u32,
    pub seed: u64,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
    pub params: Params,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Run(#[from] crate::Error),
}

impl HarnessError {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { path: path.into(), message: message.into() }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Process exit status: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ExperimentKind,
    schema_version: u32,
    seed: u64,
    output_dir: Option<PathBuf>,
    #[serde(default = "empty_table")]
    params: toml::Value,
}

fn empty_table() -> toml::Value {
    toml::Value::Table(toml::Table::new())
}

fn field_error<E: fmt::Display>(prefix: &str, err: serde_path_to_error::Error<E>) -> HarnessError {
    let inner = err.path().to_string();
    let path = match (prefix, inner.as_str()) {
        ("", p) => p.to_string(),
        (pre, ".") => pre.to_string(),
        (pre, p) => format!("{pre}.{p}"),
    };
    HarnessError::config(path, err.into_inner().to_string())
}

fn params_of<T: serde::de::DeserializeOwned>(value: toml::Value) -> Result<T, HarnessError> {
    serde_path_to_error::deserialize(value).map_err(|e| field_error("params", e))
}

impl ExperimentConfig {
    /// Parse and validate a configuration document.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| HarnessError::config(".", e.message()))?;
        let header: Header =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| field_error("", e))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", header.schema_version),
            ));
        }
        let p = header.params;
        let params = match header.kind {
            ExperimentKind::ToyFlow => Params::ToyFlow(params_of(p)?),
            ExperimentKind::ToyGd => Params::ToyGd(params_of(p)?),
            ExperimentKind::Threshold => Params::Threshold(params_of(p)?),
            ExperimentKind::Sensing => Params::Sensing(params_of(p)?),
            ExperimentKind::Quadratic => Params::Quadratic(params_of(p)?),
            ExperimentKind::DiagClassify => Params::DiagClassify(params_of(p)?),
            ExperimentKind::ConvClassify => Params::ConvClassify(params_of(p)?),
            ExperimentKind::OmpAgreement => Params::OmpAgreement(params_of(p)?),
        };
        let config = Self {
            kind: header.kind,
            schema_version: header.schema_version,
            seed: header.seed,
            output_dir: header.output_dir,
            params,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Semantic checks beyond the schema: non-empty grids and parameter
    /// ranges.
    pub fn validate(&self) -> Result<(), HarnessError> {
        match &self.params {
            Params::ToyFlow(p) => p.validate(),
            Params::ToyGd(p) => p.validate(),
            Params::Threshold(p) => p.validate(),
            Params::Sensing(p) => p.validate(),
            Params::Quadratic(p) => p.validate(),
            Params::DiagClassify(p) => p.validate(),
            Params::ConvClassify(p) => p.validate(),
            Params::OmpAgreement(p) => p.validate(),
        }
    }

    /// SHA-256 of the normalized configuration (defaults filled in, keys
    /// sorted, output location excluded).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("configuration serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// Directory the run writes to: the configured `output_dir`, or
    /// `<root>/<kind>-<hash prefix>`.
    pub fn output_path(&self, root: &Path) -> PathBuf {
        match &self.output_dir {
            Some(dir) => dir.clone(),
            None => root.join(format!("{}-{}", self.kind, &self.hash()[..12])),
        }
    }
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
}

/// Execute an experiment and write its tables, summary and manifest.
///
/// Outputs are staged in a sibling directory and moved into place only
/// when every file is written; a failed run leaves nothing behind. An
/// existing directory is replaced only if it holds a previous run.
pub fn run(config: &ExperimentConfig, output_root: &Path) -> Result<RunReport, HarnessError> {
    let started = store::unix_millis();
    let artifacts = kinds::execute(config)?;
    let dir = config.output_path(output_root);
    let manifest = store::commit(config, &dir, artifacts, started)?;
    Ok(RunReport { output_dir: dir, manifest })
}

/// Parse a config file and run it.
pub fn run_path(path: &Path, output_root: &Path) -> Result<RunReport, HarnessError> {
    let config = ExperimentConfig::from_path(path)?;
    run(&config, output_root)
}
