//! Task store backed by an append-only JSONL journal.
//!
//! Every state change is one journal event. Opening a store replays the
//! journal into an in-memory index; a torn final line left by a crash is
//! dropped. Mutations hold the write lock while appending, so journal order
//! is the order in which changes took effect.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use chrono::{DateTime, Duration, Utc};
use iterchat_core::state::{validate_gain, Violation};
use iterchat_core::{apply_gain, ApplyMode, IterChatRecord, PreferenceSchema, PreferenceState, StateGain};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Mutex::new(start))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().unwrap() += by;
    }

    pub fn set(&self, to: DateTime<Utc>) {
        *self.0.lock().unwrap() = to;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    DatasetCreated {
        dataset_id: String,
        at: DateTime<Utc>,
    },
    TaskCreated {
        task_id: String,
        dataset_id: String,
        record: IterChatRecord,
        prefilled: Option<StateGain>,
        at: DateTime<Utc>,
    },
    Leased {
        task_id: String,
        annotator_id: String,
        at: DateTime<Utc>,
        expires_at: DateTime<Utc>,
    },
    Submitted {
        task_id: String,
        annotator_id: String,
        state_gain: StateGain,
        derived_extraction: PreferenceState,
        client_started_at: Option<DateTime<Utc>>,
        submitted_at: DateTime<Utc>,
        edited: Option<bool>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Leased,
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub annotator_id: String,
    pub granted_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub annotator_id: String,
    pub state_gain: StateGain,
    pub derived_extraction: PreferenceState,
    /// Server time the lease was granted; timing starts here.
    pub started_at: DateTime<Utc>,
    /// Start time reported by the client, kept for reference.
    pub client_started_at: Option<DateTime<Utc>>,
    pub submitted_at: DateTime<Utc>,
    /// Whether the submitted gain differs from the prefilled suggestion.
    /// `None` when the task had no suggestion.
    pub edited: Option<bool>,
}

impl Submission {
    pub fn seconds(&self) -> f64 {
        (self.submitted_at - self.started_at).num_milliseconds() as f64 / 1000.0
    }
}

#[derive(Clone, Debug)]
struct Task {
    task_id: String,
    dataset_id: String,
    record: IterChatRecord,
    prefilled: Option<StateGain>,
    lease: Option<Lease>,
    submission: Option<Submission>,
}

impl Task {
    fn status(&self, now: DateTime<Utc>) -> TaskStatus {
        match (&self.submission, &self.lease) {
            (Some(_), _) => TaskStatus::Done,
            (None, Some(lease)) if lease.expires_at > now => TaskStatus::Leased,
            _ => TaskStatus::Open,
        }
    }

    fn view(&self, now: DateTime<Utc>) -> TaskView {
        let status = self.status(now);
        let mut record = self.record.clone();
        if let Some(gain) = &self.prefilled {
            record.preference_extraction = apply_gain(&record.history_preference, gain, ApplyMode::Lenient).ok();
            record.state_gain = Some(gain.clone());
        }
        TaskView {
            task_id: self.task_id.clone(),
            dataset_id: self.dataset_id.clone(),
            status,
            record,
            prefilled: self.prefilled.is_some(),
            lease: self.lease.clone().filter(|_| status == TaskStatus::Leased),
            submission: self.submission.clone(),
        }
    }
}

/// A task as reported to clients. When `prefilled` is set, the record's
/// labels are machine suggestions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub dataset_id: String,
    pub status: TaskStatus,
    pub record: IterChatRecord,
    pub prefilled: bool,
    pub lease: Option<Lease>,
    pub submission: Option<Submission>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub accepted: bool,
    pub derived_extraction: Option<PreferenceState>,
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorStats {
    pub annotator_id: String,
    pub completed: usize,
    pub mean_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub task_id: String,
    pub annotator_id: String,
    pub seconds: f64,
    pub client_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub per_annotator: Vec<AnnotatorStats>,
    pub overall: AnnotatorStats,
    pub per_task: Vec<TaskTiming>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset_id: String,
    pub task_count: usize,
    pub done: usize,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("journal {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("journal line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("dataset {0:?} already exists")]
    DuplicateDataset(String),
    #[error("task already done")]
    AlreadyDone,
    #[error("task not leased by caller")]
    NotLeased,
}

struct Inner {
    tasks: Vec<Task>,
    by_id: HashMap<String, usize>,
    datasets: Vec<(String, Vec<usize>)>,
    journal: File,
    events: usize,
}

impl Inner {
    fn apply(&mut self, event: &Event) -> Result<(), String> {
        match event {
            Event::DatasetCreated { dataset_id, .. } => {
                if self.datasets.iter().any(|(id, _)| id == dataset_id) {
                    return Err(format!("dataset {dataset_id:?} created twice"));
                }
                self.datasets.push((dataset_id.clone(), Vec::new()));
            }
            Event::TaskCreated { task_id, dataset_id, record, prefilled, .. } => {
                if self.by_id.contains_key(task_id) {
                    return Err(format!("task {task_id:?} created twice"));
                }
                let slot = self
                    .datasets
                    .iter_mut()
                    .find(|(id, _)| id == dataset_id)
                    .ok_or_else(|| format!("task {task_id:?} references unknown dataset {dataset_id:?}"))?;
                let index = self.tasks.len();
                slot.1.push(index);
                self.by_id.insert(task_id.clone(), index);
                self.tasks.push(Task {
                    task_id: task_id.clone(),
                    dataset_id: dataset_id.clone(),
                    record: record.clone(),
                    prefilled: prefilled.clone(),
                    lease: None,
                    submission: None,
                });
            }
            Event::Leased { task_id, annotator_id, at, expires_at } => {
                let task = self.task_mut(task_id)?;
                task.lease =
                    Some(Lease { annotator_id: annotator_id.clone(), granted_at: *at, expires_at: *expires_at });
            }
            Event::Submitted {
                task_id,
                annotator_id,
                state_gain,
                derived_extraction,
                client_started_at,
                submitted_at,
                edited,
            } => {
                let task = self.task_mut(task_id)?;
                let started_at = task
                    .lease
                    .as_ref()
                    .map(|l| l.granted_at)
                    .ok_or_else(|| format!("task {task_id:?} submitted without a lease"))?;
                task.submission = Some(Submission {
                    annotator_id: annotator_id.clone(),
                    state_gain: state_gain.clone(),
                    derived_extraction: derived_extraction.clone(),
                    started_at,
                    client_started_at: *client_started_at,
                    submitted_at: *submitted_at,
                    edited: *edited,
                });
            }
        }
        self.events += 1;
        Ok(())
    }

    fn task_mut(&mut self, task_id: &str) -> Result<&mut Task, String> {
        let index = *self.by_id.get(task_id).ok_or_else(|| format!("unknown task {task_id:?}"))?;
        Ok(&mut self.tasks[index])
    }
}

pub struct Store {
    schema: PreferenceSchema,
    clock: Arc<dyn Clock>,
    lease_duration: Duration,
    path: PathBuf,
    inner: RwLock<Inner>,
}

fn valid_dataset_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Store {
    /// Open (or create) the journal at `path` and replay it.
    pub fn open(
        path: &Path,
        schema: PreferenceSchema,
        lease_duration: Duration,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StoreError> {
        let io_err = |source| StoreError::Io { path: path.display().to_string(), source };
        let text = match fs::read(path) {
            Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(e)),
        };
        let mut events = Vec::new();
        let mut good_len = 0usize;
        let mut offset = 0usize;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            offset += line.len();
            let complete = line.ends_with('\n');
            if line.trim().is_empty() {
                good_len = offset;
                continue;
            }
            if !complete {
                log::warn!("dropping torn final journal line {}", i + 1);
                break;
            }
            let event = serde_json::from_str::<Event>(line.trim_end())
                .map_err(|e| StoreError::Corrupt { line: i + 1, detail: e.to_string() })?;
            events.push((i + 1, event));
            good_len = offset;
        }
        if good_len < text.len() {
            let file = OpenOptions::new().write(true).open(path).map_err(io_err)?;
            file.set_len(good_len as u64).map_err(io_err)?;
        }
        let journal = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        let mut inner = Inner { tasks: Vec::new(), by_id: HashMap::new(), datasets: Vec::new(), journal, events: 0 };
        for (line, event) in &events {
            inner.apply(event).map_err(|detail| StoreError::Corrupt { line: *line, detail })?;
        }
        Ok(Self { schema, clock, lease_duration, path: path.to_path_buf(), inner: RwLock::new(inner) })
    }

    pub fn schema(&self) -> &PreferenceSchema {
        &self.schema
    }

    fn read(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    fn append(&self, inner: &mut Inner, event: Event) -> Result<(), StoreError> {
        self.append_all(inner, vec![event])
    }

    /// Write events with a single sync, then apply them.
    fn append_all(&self, inner: &mut Inner, events: Vec<Event>) -> Result<(), StoreError> {
        let mut text = String::new();
        for event in &events {
            text.push_str(&serde_json::to_string(event).expect("event serialization"));
            text.push('\n');
        }
        let io_err = |source| StoreError::Io { path: self.path.display().to_string(), source };
        inner.journal.write_all(text.as_bytes()).map_err(io_err)?;
        inner.journal.sync_data().map_err(io_err)?;
        for event in &events {
            inner.apply(event).map_err(|detail| StoreError::Corrupt { line: inner.events + 1, detail })?;
        }
        Ok(())
    }

    /// Number of events in the journal.
    pub fn journal_len(&self) -> usize {
        self.read().events
    }

    /// Register unlabeled (or machine-prefilled) records as a new dataset.
    ///
    /// A record carrying a `state_gain` keeps it as a suggestion; the
    /// record itself is stored without labels.
    pub fn create_dataset(
        &self,
        records: Vec<IterChatRecord>,
        dataset_id: Option<String>,
    ) -> Result<(String, usize), StoreError> {
        if records.is_empty() {
            return Err(StoreError::BadRequest("dataset has no records".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.record_id.as_str()) {
                return Err(StoreError::BadRequest(format!("duplicate record_id {:?}", r.record_id)));
            }
            if r.user_utterance.trim().is_empty() {
                return Err(StoreError::BadRequest(format!("record {:?} has an empty user utterance", r.record_id)));
            }
            for (slot, values) in r.history_preference.iter() {
                if let Some(issue) = self.schema.validate_assignment(slot, values).issues.first() {
                    return Err(StoreError::BadRequest(format!("record {:?} history: {issue}", r.record_id)));
                }
            }
        }
        let mut inner = self.write();
        let dataset_id = match dataset_id {
            Some(id) if !valid_dataset_id(&id) => {
                return Err(StoreError::BadRequest(format!("invalid dataset id {id:?}")));
            }
            Some(id) if inner.datasets.iter().any(|(d, _)| *d == id) => {
                return Err(StoreError::DuplicateDataset(id));
            }
            Some(id) => id,
            None => {
                let mut n = inner.datasets.len() + 1;
                while inner.datasets.iter().any(|(d, _)| *d == format!("ds{n}")) {
                    n += 1;
                }
                format!("ds{n}")
            }
        };
        let now = self.clock.now();
        let count = records.len();
        let mut events = vec![Event::DatasetCreated { dataset_id: dataset_id.clone(), at: now }];
        for (i, record) in records.into_iter().enumerate() {
            events.push(Event::TaskCreated {
                task_id: format!("{dataset_id}-{:05}", i + 1),
                dataset_id: dataset_id.clone(),
                prefilled: record.state_gain.clone(),
                record: record.unlabeled(),
                at: now,
            });
        }
        self.append_all(&mut inner, events)?;
        Ok((dataset_id, count))
    }

    /// Lease the oldest open or lease-expired task.
    ///
    /// An annotator who still holds a live lease gets that task back.
    pub fn lease_next(&self, annotator_id: &str) -> Result<Option<TaskView>, StoreError> {
        let annotator_id = annotator_id.trim();
        if annotator_id.is_empty() {
            return Err(StoreError::BadRequest("annotator_id is empty".into()));
        }
        let mut inner = self.write();
        let now = self.clock.now();
        let held = inner.tasks.iter().position(|t| {
            t.status(now) == TaskStatus::Leased && t.lease.as_ref().is_some_and(|l| l.annotator_id == annotator_id)
        });
        if let Some(i) = held {
            return Ok(Some(inner.tasks[i].view(now)));
        }
        let Some(index) = inner.tasks.iter().position(|t| t.status(now) == TaskStatus::Open) else {
            return Ok(None);
        };
        let task_id = inner.tasks[index].task_id.clone();
        self.append(
            &mut inner,
            Event::Leased {
                task_id,
                annotator_id: annotator_id.to_string(),
                at: now,
                expires_at: now + self.lease_duration,
            },
        )?;
        Ok(Some(inner.tasks[index].view(now)))
    }

    /// Validate and record an annotator's gain.
    ///
    /// Violations reject the submission and leave the task leased.
    pub fn submit(
        &self,
        task_id: &str,
        annotator_id: &str,
        state_gain: StateGain,
        client_started_at: Option<DateTime<Utc>>,
    ) -> Result<SubmitOutcome, StoreError> {
        let mut inner = self.write();
        let now = self.clock.now();
        let index = *inner.by_id.get(task_id).ok_or_else(|| StoreError::UnknownTask(task_id.to_string()))?;
        let task = &inner.tasks[index];
        match task.status(now) {
            TaskStatus::Done => return Err(StoreError::AlreadyDone),
            TaskStatus::Open => return Err(StoreError::NotLeased),
            TaskStatus::Leased if task.lease.as_ref().is_some_and(|l| l.annotator_id != annotator_id.trim()) => {
                return Err(StoreError::NotLeased);
            }
            TaskStatus::Leased => {}
        }
        let derived = match validate_gain(&self.schema, &task.record.history_preference, &state_gain) {
            Ok(derived) => derived,
            Err(violations) => return Ok(SubmitOutcome { accepted: false, derived_extraction: None, violations }),
        };
        let edited = task.prefilled.as_ref().map(|p| {
            apply_gain(&task.record.history_preference, p, ApplyMode::Lenient).ok().as_ref() != Some(&derived)
        });
        self.append(
            &mut inner,
            Event::Submitted {
                task_id: task_id.to_string(),
                annotator_id: annotator_id.trim().to_string(),
                state_gain,
                derived_extraction: derived.clone(),
                client_started_at,
                submitted_at: now,
                edited,
            },
        )?;
        Ok(SubmitOutcome { accepted: true, derived_extraction: Some(derived), violations: Vec::new() })
    }

    pub fn task(&self, task_id: &str) -> Option<TaskView> {
        let inner = self.read();
        let now = self.clock.now();
        inner.by_id.get(task_id).map(|&i| inner.tasks[i].view(now))
    }

    /// Every task in creation order.
    pub fn tasks(&self) -> Vec<TaskView> {
        let inner = self.read();
        let now = self.clock.now();
        inner.tasks.iter().map(|t| t.view(now)).collect()
    }

    pub fn datasets(&self) -> Vec<DatasetSummary> {
        let inner = self.read();
        inner
            .datasets
            .iter()
            .map(|(id, tasks)| DatasetSummary {
                dataset_id: id.clone(),
                task_count: tasks.len(),
                done: tasks.iter().filter(|&&i| inner.tasks[i].submission.is_some()).count(),
            })
            .collect()
    }

    /// Timing over submissions, optionally for one annotator.
    pub fn stats(&self, annotator_id: Option<&str>) -> Stats {
        let inner = self.read();
        let mut per: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        let mut per_task = Vec::new();
        for task in &inner.tasks {
            let Some(s) = &task.submission else { continue };
            if annotator_id.is_some_and(|a| a != s.annotator_id) {
                continue;
            }
            let seconds = s.seconds();
            let entry = per.entry(s.annotator_id.as_str()).or_default();
            entry.0 += 1;
            entry.1 += seconds;
            per_task.push(TaskTiming {
                task_id: task.task_id.clone(),
                annotator_id: s.annotator_id.clone(),
                seconds,
                client_seconds: s.client_started_at.map(|c| (s.submitted_at - c).num_milliseconds() as f64 / 1000.0),
            });
        }
        let summarize = |annotator_id: &str, completed: usize, total: f64| AnnotatorStats {
            annotator_id: annotator_id.to_string(),
            completed,
            mean_seconds: if completed == 0 { 0.0 } else { total / completed as f64 },
            total_seconds: total,
        };
        let per_annotator: Vec<AnnotatorStats> = per.iter().map(|(a, (n, t))| summarize(a, *n, *t)).collect();
        let completed = per_annotator.iter().map(|a| a.completed).sum();
        let total = per_annotator.iter().map(|a| a.total_seconds).sum();
        Stats { overall: summarize(annotator_id.unwrap_or("*"), completed, total), per_annotator, per_task }
    }

    /// Labeled records for the finished tasks of a dataset, in upload order.
    pub fn export(&self, dataset_id: &str) -> Result<Vec<IterChatRecord>, StoreError> {
        let inner = self.read();
        let (_, tasks) = inner
            .datasets
            .iter()
            .find(|(id, _)| id == dataset_id)
            .ok_or_else(|| StoreError::UnknownDataset(dataset_id.to_string()))?;
        Ok(tasks
            .iter()
            .filter_map(|&i| {
                let task = &inner.tasks[i];
                let s = task.submission.as_ref()?;
                Some(IterChatRecord {
                    state_gain: Some(s.state_gain.clone()),
                    preference_extraction: Some(s.derived_extraction.clone()),
                    ..task.record.clone()
                })
            })
            .collect())
    }
}
