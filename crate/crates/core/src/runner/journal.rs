//! Append-only JSONL journal of a run.
//!
//! The first line is a header identifying the run. Every finished iteration
//! appends one self-contained entry; a record that fails appends one error
//! line. Each line is written with a single `write` call, so a crash leaves
//! at most one partial trailing line, which resume truncates.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Usage;
use crate::engine::{IterationRecord, StopReason};
use crate::types::{
    AnalysisMode, BehaviorSample, DivergenceReport, MetricKind, MetricVector, PersonaProfile,
};

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}: journal has no header line")]
    MissingHeader(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalHeader {
    pub run_id: String,
    pub manifest_digest: String,
    pub baa_mode: AnalysisMode,
    /// Scenario names of the run's datasets joined with `+`.
    pub dataset: String,
    pub created_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub run_id: String,
    pub record_id: String,
    pub iteration: u32,
    pub persona_before_digest: String,
    pub persona_after: PersonaProfile,
    pub behavior: String,
    pub raw_completion: String,
    /// Absent for iteration 0.
    pub analysis: Option<String>,
    pub metrics: MetricVector,
    pub skipped_metrics: Vec<MetricKind>,
    pub refinement_rejected: bool,
    pub usage: Usage,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    /// Set on the record's last iteration.
    pub stop: Option<StopReason>,
}

impl JournalEntry {
    pub fn from_iteration(
        run_id: &str,
        record_id: &str,
        rec: &IterationRecord,
        stop: Option<StopReason>,
    ) -> Self {
        Self {
            run_id: run_id.to_string(),
            record_id: record_id.to_string(),
            iteration: rec.iteration,
            persona_before_digest: rec.persona_before.digest(),
            persona_after: rec.persona_after.clone(),
            behavior: rec.behavior.text.clone(),
            raw_completion: rec.behavior.raw_completion.clone(),
            analysis: rec.report.as_ref().map(|r| r.text.clone()),
            metrics: rec.metrics,
            skipped_metrics: rec.metrics.skipped(),
            refinement_rejected: rec.refinement_rejected,
            usage: rec.usage,
            started_at_ms: rec.started_at_ms,
            finished_at_ms: rec.finished_at_ms,
            stop,
        }
    }

    /// Copy with wall-clock fields zeroed, for replay comparisons.
    pub fn without_timestamps(&self) -> Self {
        Self {
            started_at_ms: 0,
            finished_at_ms: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordErrorEntry {
    pub run_id: String,
    pub record_id: String,
    /// The iteration that failed.
    pub iteration: u32,
    pub error: String,
    pub at_ms: u64,
}

impl RecordErrorEntry {
    pub fn without_timestamps(&self) -> Self {
        Self {
            at_ms: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalLine {
    Header(JournalHeader),
    Iteration(Box<JournalEntry>),
    RecordError(RecordErrorEntry),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JournalContents {
    pub header: Option<JournalHeader>,
    pub entries: Vec<JournalEntry>,
    pub errors: Vec<RecordErrorEntry>,
    /// Byte length of the well-formed prefix.
    pub valid_len: u64,
    /// Bytes after `valid_len` (a partial trailing line).
    pub trailing_garbage: u64,
}

impl JournalContents {
    pub fn entries_for<'a>(
        &'a self,
        record_id: &'a str,
    ) -> impl Iterator<Item = &'a JournalEntry> + 'a {
        self.entries
            .iter()
            .filter(move |e| e.record_id == record_id)
    }

    pub fn error_for(&self, record_id: &str) -> Option<&RecordErrorEntry> {
        self.errors.iter().find(|e| e.record_id == record_id)
    }

    /// Record ids in first-seen order.
    pub fn record_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        let all = self
            .entries
            .iter()
            .map(|e| &e.record_id)
            .chain(self.errors.iter().map(|e| &e.record_id));
        for id in all {
            if !ids.contains(id) {
                ids.push(id.clone());
            }
        }
        ids
    }

    /// Entries and errors sorted by `(record_id, iteration)` with timestamps
    /// zeroed.
    pub fn canonical(&self) -> Vec<JournalLine> {
        let mut lines: Vec<(String, u32, u8, JournalLine)> = self
            .entries
            .iter()
            .map(|e| {
                (
                    e.record_id.clone(),
                    e.iteration,
                    0,
                    JournalLine::Iteration(Box::new(e.without_timestamps())),
                )
            })
            .chain(self.errors.iter().map(|e| {
                (
                    e.record_id.clone(),
                    e.iteration,
                    1,
                    JournalLine::RecordError(e.without_timestamps()),
                )
            }))
            .collect();
        lines.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));
        lines.into_iter().map(|l| l.3).collect()
    }
}

/// Rebuilds the in-memory iterations of one record from its entries, which
/// must be contiguous from iteration 0.
pub fn replay_iterations(
    entries: &[&JournalEntry],
    baa_mode: AnalysisMode,
) -> Result<Vec<IterationRecord>, String> {
    let mut out: Vec<IterationRecord> = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        if e.iteration as usize != i {
            return Err(format!(
                "record {}: expected iteration {i}, found {}",
                e.record_id, e.iteration
            ));
        }
        let persona_before = match out.last() {
            Some(prev) => prev.persona_after.clone(),
            None => e.persona_after.clone(),
        };
        if persona_before.digest() != e.persona_before_digest {
            return Err(format!(
                "record {} iteration {}: persona digest chain broken",
                e.record_id, e.iteration
            ));
        }
        out.push(IterationRecord {
            iteration: e.iteration,
            persona_before,
            persona_after: e.persona_after.clone(),
            behavior: BehaviorSample {
                text: e.behavior.clone(),
                record_id: e.record_id.clone(),
                iteration: e.iteration,
                raw_completion: e.raw_completion.clone(),
            },
            report: e.analysis.as_ref().map(|text| DivergenceReport {
                text: text.clone(),
                mode: baa_mode,
                record_id: e.record_id.clone(),
                iteration: e.iteration,
            }),
            metrics: e.metrics,
            refinement_rejected: e.refinement_rejected,
            usage: e.usage,
            started_at_ms: e.started_at_ms,
            finished_at_ms: e.finished_at_ms,
        });
    }
    Ok(out)
}

fn parse(path: &Path, bytes: &[u8]) -> Result<JournalContents, JournalError> {
    let mut contents = JournalContents::default();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            // Unterminated: the writer died mid-line.
            break;
        };
        line_no += 1;
        let raw = &bytes[offset..offset + nl];
        let end = offset + nl + 1;
        let text = std::str::from_utf8(raw).map_err(|e| corrupt(path, line_no, e.to_string()));
        let parsed = text.and_then(|t| {
            if t.trim().is_empty() {
                Ok(None)
            } else {
                serde_json::from_str::<JournalLine>(t)
                    .map(Some)
                    .map_err(|e| corrupt(path, line_no, e.to_string()))
            }
        });
        match parsed {
            Ok(None) => {}
            Ok(Some(JournalLine::Header(h))) => {
                if contents.header.is_some()
                    || !contents.entries.is_empty()
                    || !contents.errors.is_empty()
                {
                    return Err(corrupt(
                        path,
                        line_no,
                        "header must be the first line".into(),
                    ));
                }
                contents.header = Some(h);
            }
            Ok(Some(JournalLine::Iteration(e))) => contents.entries.push(*e),
            Ok(Some(JournalLine::RecordError(e))) => contents.errors.push(e),
            Err(err) => {
                if end == bytes.len() {
                    // A damaged final line is treated like a partial one.
                    break;
                }
                return Err(err);
            }
        }
        offset = end;
    }
    contents.valid_len = offset as u64;
    contents.trailing_garbage = (bytes.len() - offset) as u64;
    Ok(contents)
}

fn corrupt(path: &Path, line: usize, message: String) -> JournalError {
    JournalError::Corrupt {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> JournalError + '_ {
    move |source| JournalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a journal without modifying it. A partial trailing line is ignored.
pub fn read_journal(path: &Path) -> Result<JournalContents, JournalError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let contents = parse(path, &bytes)?;
    if contents.trailing_garbage > 0 {
        log::warn!(
            "{}: ignoring {} bytes of partial trailing line",
            path.display(),
            contents.trailing_garbage
        );
    }
    Ok(contents)
}

/// Serialized appender; one line per call.
pub struct JournalWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl JournalWriter {
    /// Creates a new journal; fails if the file exists and is nonempty.
    pub fn create(path: &Path, header: &JournalHeader) -> Result<Self, JournalError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(path))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        if file.metadata().map_err(io_err(path))?.len() > 0 {
            return Err(JournalError::Io {
                path: path.to_path_buf(),
                source: io::Error::new(
                    io::ErrorKind::AlreadyExists,
                    "journal already exists; use resume",
                ),
            });
        }
        let writer = Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        };
        writer.append(&JournalLine::Header(header.clone()))?;
        Ok(writer)
    }

    /// Opens an existing journal for appending after truncating any partial
    /// trailing line.
    pub fn reopen(path: &Path) -> Result<(Self, JournalContents), JournalError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let contents = parse(path, &bytes)?;
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        if contents.trailing_garbage > 0 {
            log::warn!(
                "{}: truncating {} bytes of partial trailing line",
                path.display(),
                contents.trailing_garbage
            );
            file.set_len(contents.valid_len).map_err(io_err(path))?;
            file.sync_all().map_err(io_err(path))?;
        }
        drop(file);
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file: Mutex::new(file),
            },
            contents,
        ))
    }

    pub fn append(&self, line: &JournalLine) -> Result<(), JournalError> {
        let mut buf = serde_json::to_string(line).expect("journal lines serialize");
        buf.push('\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(buf.as_bytes()).map_err(io_err(&self.path))?;
        file.flush().map_err(io_err(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
