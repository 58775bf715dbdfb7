//! Append-only run store backed by one JSON-lines file.
//!
//! The whole file is indexed on open. A final line without its newline is a
//! torn write: it is cut off with a warning and every earlier record stays
//! loadable. Classifier profiles live in a sibling `*.profiles.jsonl` file.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ClassifierProfile, ScenarioConfig};
use crate::stations::RunReport;

/// Environment variable naming the default store path.
pub const STORE_ENV: &str = "LOOMLINE_STORE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub scenario: ScenarioConfig,
    pub report: RunReport,
    pub profile_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub garment_count: u32,
    pub total_time: f64,
    pub green_efficiency: f64,
}

impl From<&RunRecord> for RunSummary {
    fn from(r: &RunRecord) -> Self {
        RunSummary {
            run_id: r.run_id.clone(),
            created_at: r.created_at,
            garment_count: r.scenario.garment_count,
            total_time: r.report.summary.total_time,
            green_efficiency: r.report.summary.green_efficiency,
        }
    }
}

/// Scenario-field predicates; unset fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunFilter {
    pub garment_count: Option<u32>,
    pub conveyor_speed: Option<u32>,
    pub arm_speed: Option<u32>,
    pub camera_capture_time: Option<u32>,
    pub laser_speed: Option<u32>,
    pub error_percent: Option<f64>,
    pub profile_name: Option<String>,
}

impl RunFilter {
    pub fn matches(&self, record: &RunRecord) -> bool {
        let s = &record.scenario;
        self.garment_count.is_none_or(|v| v == s.garment_count)
            && self.conveyor_speed.is_none_or(|v| v == s.conveyor_speed)
            && self.arm_speed.is_none_or(|v| v == s.arm_speed)
            && self
                .camera_capture_time
                .is_none_or(|v| v == s.camera_capture_time)
            && self.laser_speed.is_none_or(|v| v == s.laser_speed)
            && self.error_percent.is_none_or(|v| v == s.error_percent)
            && self
                .profile_name
                .as_ref()
                .is_none_or(|v| *v == record.profile_name)
    }
}

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("run `{0}` already exists")]
    Conflict(String),
    #[error("run `{0}` not found")]
    NotFound(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: corrupt record: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RepoError + '_ {
    move |source| RepoError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Run store. One writer per file; readers opened earlier keep their
/// snapshot.
#[derive(Debug)]
pub struct Store {
    path: Option<PathBuf>,
    records: Vec<RunRecord>,
    index: HashMap<String, usize>,
    profiles: Vec<ClassifierProfile>,
    issued: usize,
}

impl Store {
    /// Store that lives only in memory.
    pub fn in_memory() -> Self {
        Store {
            path: None,
            records: Vec::new(),
            index: HashMap::new(),
            profiles: Vec::new(),
            issued: 0,
        }
    }

    /// Opens (creating if needed) the store at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RepoError> {
        let path = path.as_ref().to_owned();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let records: Vec<RunRecord> = read_jsonl(&path)?;
        let profiles = read_jsonl(&profiles_path(&path))?;
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.run_id.clone(), i))
            .collect();
        let issued = records.len();
        Ok(Store {
            path: Some(path),
            records,
            index,
            profiles,
            issued,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Fresh id: zero-padded sequence number plus a short random suffix.
    /// Ids handed out but never saved are not reused.
    pub fn next_run_id(&mut self) -> String {
        self.issued = self.issued.max(self.records.len()) + 1;
        let suffix: u16 = rand::random();
        format!("{:06}-{:04x}", self.issued, suffix)
    }

    pub fn save_run(&mut self, record: RunRecord) -> Result<String, RepoError> {
        if self.index.contains_key(&record.run_id) {
            return Err(RepoError::Conflict(record.run_id));
        }
        if let Some(path) = &self.path {
            append_line(path, &record)?;
        }
        let id = record.run_id.clone();
        self.index.insert(id.clone(), self.records.len());
        self.records.push(record);
        Ok(id)
    }

    pub fn load_run(&self, run_id: &str) -> Result<&RunRecord, RepoError> {
        self.index
            .get(run_id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| RepoError::NotFound(run_id.to_owned()))
    }

    /// Matching summaries in creation order, newest last.
    pub fn list_runs(&self, filter: &RunFilter) -> Vec<RunSummary> {
        self.records
            .iter()
            .filter(|r| filter.matches(r))
            .map(RunSummary::from)
            .collect()
    }

    pub fn profiles(&self) -> &[ClassifierProfile] {
        &self.profiles
    }

    /// Adds a profile unless one with the same name is already stored.
    pub fn save_profile(&mut self, profile: ClassifierProfile) -> Result<(), RepoError> {
        if let Some(existing) = self.profiles.iter().find(|p| p.name == profile.name) {
            return if *existing == profile {
                Ok(())
            } else {
                Err(RepoError::Conflict(profile.name))
            };
        }
        if let Some(path) = &self.path {
            append_line(&profiles_path(path), &profile)?;
        }
        self.profiles.push(profile);
        Ok(())
    }
}

fn profiles_path(path: &Path) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".profiles.jsonl");
    path.with_file_name(name)
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<(), RepoError> {
    let mut line = serde_json::to_string(value).expect("record serializes");
    line.push('\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(line.as_bytes()).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RepoError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => i + 1,
        None => 0,
    };
    if complete < text.len() {
        log::warn!(
            "{}: dropping truncated final line ({} bytes)",
            path.display(),
            text.len() - complete
        );
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        file.set_len(complete as u64).map_err(io_err(path))?;
        file.sync_data().map_err(io_err(path))?;
    }
    let mut out = Vec::new();
    for (i, line) in text[..complete].lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| RepoError::Corrupt {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Touches the store file so that a fresh store exists on disk.
pub fn ensure_store_file(path: &Path) -> Result<(), RepoError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(|_: File| ())
        .map_err(io_err(path))
}
