use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pipeline::{DatasetManifest, Status};

use super::ReviewError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

impl Decision {
    pub fn status(self) -> Status {
        match self {
            Decision::Accept => Status::Accepted,
            Decision::Reject => Status::Rejected,
        }
    }
}

/// One line of the verdict log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: String,
    /// The fit the annotator looked at; the verdict only applies to it.
    pub fit: String,
    pub decision: Decision,
    pub annotator: String,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

/// Body of `POST /items/{id}/verdict`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRequest {
    pub decision: Decision,
    pub annotator: String,
    #[serde(default)]
    pub note: Option<String>,
    /// Retries carrying the same id are answered with the first verdict.
    #[serde(default)]
    pub request_id: Option<String>,
    /// When given, must name the sample's current fit.
    #[serde(default)]
    pub fit: Option<String>,
}

impl VerdictRequest {
    pub fn parse(body: &[u8]) -> Result<Self, ReviewError> {
        let req: VerdictRequest = serde_json::from_slice(body).map_err(|e| ReviewError::Malformed(e.to_string()))?;
        if req.annotator.trim().is_empty() {
            return Err(ReviewError::Malformed("annotator is empty".into()));
        }
        if req.request_id.as_deref().is_some_and(str::is_empty) {
            return Err(ReviewError::Malformed("request_id is empty".into()));
        }
        Ok(req)
    }
}

pub fn verdict_log_path(manifest_path: &Path) -> PathBuf {
    let stem = manifest_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "manifest".into());
    manifest_path.with_file_name(format!("{stem}.verdicts.jsonl"))
}

/// Parses a verdict log. A final line without its newline is a torn write and
/// is dropped; any other unparsable line is an error. Returns the verdicts
/// and the byte length of the intact prefix.
fn parse_log(path: &Path, bytes: &[u8]) -> Result<(Vec<Verdict>, usize), ReviewError> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < bytes.len() {
        let Some(len) = bytes[start..].iter().position(|&b| b == b'\n') else {
            log::warn!("{}: dropping a torn final record", path.display());
            break;
        };
        let line = &bytes[start..start + len];
        if !line.iter().all(u8::is_ascii_whitespace) {
            let v = serde_json::from_slice(line).map_err(|e| ReviewError::Log {
                path: path.to_path_buf(),
                message: format!("record at byte {start}: {e}"),
            })?;
            out.push(v);
        }
        start += len + 1;
    }
    Ok((out, start.min(bytes.len())))
}

pub fn read_verdicts(path: &Path) -> Result<Vec<Verdict>, ReviewError> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(parse_log(path, &bytes)?.0),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(ReviewError::io(path, e)),
    }
}

/// Sets each sample's status from the latest verdict on its current fit.
/// Samples without such a verdict keep their status. Returns whether any
/// status changed.
pub fn replay(manifest: &mut DatasetManifest, verdicts: &[Verdict]) -> bool {
    let mut changed = false;
    for s in &mut manifest.samples {
        let Some(fit) = s.fit.as_deref() else { continue };
        if let Some(v) = verdicts.iter().rev().find(|v| v.id == s.id && v.fit == fit) {
            let st = v.decision.status();
            changed |= s.status != st;
            s.status = st;
        }
    }
    changed
}

/// Append handle on the log; every record is synced before it counts.
pub struct VerdictLog {
    path: PathBuf,
    file: File,
}

impl VerdictLog {
    /// Opens (creating if needed) the log, cutting off a torn final record,
    /// and returns the verdicts already in it.
    pub fn open(path: &Path) -> Result<(Self, Vec<Verdict>), ReviewError> {
        let io = |e| ReviewError::io(path, e);
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io(e)),
        };
        let (verdicts, intact) = parse_log(path, &bytes)?;
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if intact < bytes.len() {
            file.set_len(intact as u64).map_err(io)?;
        }
        Ok((VerdictLog { path: path.to_path_buf(), file }, verdicts))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, v: &Verdict) -> Result<(), ReviewError> {
        let mut line = serde_json::to_vec(v).expect("verdicts serialize");
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| ReviewError::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| ReviewError::io(&self.path, e))
    }
}
