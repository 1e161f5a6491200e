//! Manifest-driven runs: dataset loading, bounded concurrency, journaling,
//! resume, and aggregation of journals into comparison tables.

pub mod journal;
pub mod manifest;
pub mod report;

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::agents::Agents;
use crate::backends::{ChatBackend, Sleeper, ThreadSleeper};
use crate::datasets::{load_dataset, DatasetError, ScenarioSpec};
use crate::engine::{now_ms, Engine, IterationRecord, StopReason};
use crate::metrics::MetricSuite;
use crate::types::TaskRecord;

pub use journal::{
    read_journal, JournalContents, JournalEntry, JournalError, JournalHeader, JournalLine,
    JournalWriter, RecordErrorEntry,
};
pub use manifest::{
    ChatBackendConfig, DatasetRef, EmbeddingConfig, ManifestError, ModelClass, RunManifest,
};
pub use report::{
    aggregate, export_report, AggregateReport, ExportFormat, MetricSummary, ReportError,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("record id {0:?} appears in more than one dataset")]
    DuplicateRecord(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("journal {path} belongs to a different manifest (journal digest {found}, manifest digest {expected})")]
    JournalMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error("journal {0} is inconsistent: {1}")]
    JournalInconsistent(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunSummary {
    pub run_id: String,
    pub records_total: usize,
    /// Records that reached a stop criterion (this invocation or earlier).
    pub completed: usize,
    /// Records journaled as `record_error`.
    pub failed: usize,
    /// Records already finished in the journal before this invocation.
    pub already_done: usize,
    pub entries_written: usize,
    pub stop_reasons: BTreeMap<StopReason, usize>,
}

/// Executes manifests; the chat backend and sleeper can be swapped for
/// tests.
pub struct Runner {
    manifest: RunManifest,
    chat: Arc<dyn ChatBackend>,
    metrics: MetricSuite,
    sleeper: Arc<dyn Sleeper>,
}

struct Pending {
    record: TaskRecord,
    prior: Vec<IterationRecord>,
}

impl Runner {
    pub fn new(manifest: RunManifest) -> Result<Self, RunError> {
        manifest.validate()?;
        let chat = manifest.build_chat_backend()?;
        Self::with_backend(manifest, chat)
    }

    pub fn with_backend(
        manifest: RunManifest,
        chat: Arc<dyn ChatBackend>,
    ) -> Result<Self, RunError> {
        manifest.validate()?;
        let metrics = manifest.build_metrics()?;
        Ok(Self {
            manifest,
            chat,
            metrics,
            sleeper: Arc::new(ThreadSleeper),
        })
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn header(&self) -> JournalHeader {
        JournalHeader {
            run_id: self.manifest.run_id.clone(),
            manifest_digest: self.manifest.digest(),
            baa_mode: self.manifest.agent.baa_mode,
            dataset: self.manifest.dataset_label(),
            created_at_ms: now_ms(),
        }
    }

    fn engine(&self) -> Engine {
        let agents = Agents::new(
            self.chat.clone(),
            Arc::new(self.manifest.prompt_registry()),
            self.manifest.agent.clone(),
        )
        .with_sleeper(self.sleeper.clone());
        Engine::new(agents, self.metrics.clone(), self.manifest.stop_criterion())
    }

    fn load_records(&self) -> Result<Vec<TaskRecord>, RunError> {
        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for d in &self.manifest.datasets {
            let file = load_dataset(&d.path, &ScenarioSpec::for_scenario(d.scenario))?;
            for r in file.records {
                if !seen.insert(r.id.clone()) {
                    return Err(RunError::DuplicateRecord(r.id));
                }
                records.push(r);
            }
        }
        Ok(records)
    }

    /// Starts a fresh run. Refuses to touch an existing nonempty journal.
    pub fn execute(&self) -> Result<RunSummary, RunError> {
        let records = self.load_records()?;
        let writer = JournalWriter::create(&self.manifest.journal_path, &self.header())?;
        let pending = records
            .into_iter()
            .map(|record| Pending {
                record,
                prior: Vec::new(),
            })
            .collect();
        let mut summary = self.drive(&writer, pending)?;
        summary.records_total = summary.completed + summary.failed;
        Ok(summary)
    }

    /// Continues an interrupted run from its journal.
    pub fn resume(&self) -> Result<RunSummary, RunError> {
        let records = self.load_records()?;
        let path = &self.manifest.journal_path;
        let expected = self.manifest.digest();
        // Checked before reopening so a mismatched journal is left untouched.
        if let Some(h) = read_journal(path)?.header {
            if h.manifest_digest != expected {
                return Err(RunError::JournalMismatch {
                    path: path.display().to_string(),
                    expected,
                    found: h.manifest_digest,
                });
            }
        }
        let (writer, contents) = JournalWriter::reopen(path)?;
        let header = match contents.header.clone() {
            Some(h) => h,
            // Interrupted before the header reached disk.
            None if contents.entries.is_empty() && contents.errors.is_empty() => {
                let h = self.header();
                writer.append(&JournalLine::Header(h.clone()))?;
                h
            }
            None => return Err(JournalError::MissingHeader(path.clone()).into()),
        };

        let mut done = RunSummary::default();
        let mut pending = Vec::new();
        for record in records {
            let entries: Vec<&JournalEntry> = contents.entries_for(&record.id).collect();
            if contents.error_for(&record.id).is_some() {
                done.failed += 1;
                done.already_done += 1;
                *done
                    .stop_reasons
                    .entry(StopReason::RecordError)
                    .or_default() += 1;
                continue;
            }
            if let Some(reason) = entries.last().and_then(|e| e.stop) {
                done.completed += 1;
                done.already_done += 1;
                *done.stop_reasons.entry(reason).or_default() += 1;
                continue;
            }
            let prior = journal::replay_iterations(&entries, header.baa_mode)
                .map_err(|m| RunError::JournalInconsistent(path.display().to_string(), m))?;
            pending.push(Pending { record, prior });
        }

        let fresh = self.drive(&writer, pending)?;
        let mut summary = RunSummary {
            run_id: self.manifest.run_id.clone(),
            completed: done.completed + fresh.completed,
            failed: done.failed + fresh.failed,
            already_done: done.already_done,
            entries_written: fresh.entries_written,
            stop_reasons: done.stop_reasons,
            records_total: 0,
        };
        for (k, v) in fresh.stop_reasons {
            *summary.stop_reasons.entry(k).or_default() += v;
        }
        summary.records_total = summary.completed + summary.failed;
        Ok(summary)
    }

    fn drive(&self, writer: &JournalWriter, pending: Vec<Pending>) -> Result<RunSummary, RunError> {
        let engine = self.engine();
        let run_id = self.manifest.run_id.as_str();
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let fatal: Mutex<Option<JournalError>> = Mutex::new(None);
        let summary = Mutex::new(RunSummary {
            run_id: run_id.to_string(),
            ..RunSummary::default()
        });
        let slots: Vec<Mutex<Option<Pending>>> =
            pending.into_iter().map(|p| Mutex::new(Some(p))).collect();
        let workers = self.manifest.concurrency_limit.min(slots.len());

        let fail = |e: JournalError| {
            abort.store(true, Ordering::SeqCst);
            fatal.lock().unwrap().get_or_insert(e);
        };

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        return;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(slot) = slots.get(i) else { return };
                    let Pending { record, prior } =
                        slot.lock().unwrap().take().expect("each slot taken once");

                    let mut written = 0usize;
                    let mut write_failed = false;
                    let traj = engine.run_from(&record, prior, &mut |rec, stop| {
                        if write_failed {
                            return;
                        }
                        let line = JournalLine::Iteration(Box::new(JournalEntry::from_iteration(
                            run_id, &record.id, rec, stop,
                        )));
                        match writer.append(&line) {
                            Ok(()) => written += 1,
                            Err(e) => {
                                write_failed = true;
                                fail(e);
                            }
                        }
                    });
                    if write_failed {
                        return;
                    }

                    let mut s = summary.lock().unwrap();
                    s.entries_written += written;
                    if let Some(error) = &traj.error {
                        let iteration = traj.last().map(|r| r.iteration + 1).unwrap_or(0);
                        let line = JournalLine::RecordError(RecordErrorEntry {
                            run_id: run_id.to_string(),
                            record_id: record.id.clone(),
                            iteration,
                            error: error.clone(),
                            at_ms: now_ms(),
                        });
                        if let Err(e) = writer.append(&line) {
                            fail(e);
                            return;
                        }
                        s.failed += 1;
                        *s.stop_reasons.entry(StopReason::RecordError).or_default() += 1;
                    } else {
                        s.completed += 1;
                        *s.stop_reasons.entry(traj.stop_reason).or_default() += 1;
                    }
                });
            }
        });

        if let Some(e) = fatal.into_inner().unwrap() {
            return Err(e.into());
        }
        Ok(summary.into_inner().unwrap())
    }
}

pub fn execute_run(manifest: &RunManifest) -> Result<RunSummary, RunError> {
    Runner::new(manifest.clone())?.execute()
}

pub fn resume_run(manifest: &RunManifest) -> Result<RunSummary, RunError> {
    Runner::new(manifest.clone())?.resume()
}
