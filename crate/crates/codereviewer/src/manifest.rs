//! Provenance records written next to every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{CleanConfig, CleanStats};
use crate::formats::{write_json, FormatError};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config_path: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
            started_at: timestamp(Utc::now()),
            finished_at: String::new(),
        }
    }

    /// Stamps the finish time and writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> Result<(), FormatError> {
        self.finished_at = timestamp(Utc::now());
        write_json(path, &self)
    }
}

fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Where the run manifest of an artifact goes: inside a directory artifact,
/// or beside a file artifact with a `.manifest.json` suffix.
pub fn manifest_path_for(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join("run_manifest.json")
    } else {
        let mut p = artifact.as_os_str().to_owned();
        p.push(".manifest.json");
        PathBuf::from(p)
    }
}

/// Sidecar of a dataset build. Holds no timestamps so rebuilds compare
/// byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: String,
    pub seed: u64,
    pub rule_version: String,
    pub clean_config: CleanConfig,
    pub clean_stats: CleanStats,
    pub input_records: usize,
    pub dropped_records: usize,
    pub splits: BTreeMap<String, SplitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub file: String,
    pub samples: usize,
    pub repos: Vec<String>,
    /// Quality datasets only: label 1 and label 0 counts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positives: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negatives: Option<usize>,
}
