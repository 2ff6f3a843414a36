//! Study sessions, feedback and their single-directory persistence: an
//! append-only JSON-lines event log plus a periodically rewritten snapshot.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use drscreen_core::preprocess::Provenance;
use drscreen_core::workflow::{PendingScreening, ScreeningResult};
use drscreen_core::Grade;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SNAPSHOT: &str = "snapshot.json";
const LOG: &str = "events.jsonl";
/// Events appended before the snapshot is rewritten and the log truncated.
const SNAPSHOT_EVERY: usize = 256;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: line {line}: {source}", path.display())]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyStatus {
    Open,
    Closed,
}

/// Where one submitted image stands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ImageState {
    AwaitingMdDecision { pending: PendingScreening },
    Complete { result: ScreeningResult },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyImage {
    pub image_id: String,
    pub state: ImageState,
    /// How the latest upload was cropped and scaled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<Provenance>,
    /// Earlier attempts that ended in a retake, oldest first.
    #[serde(default)]
    pub retaken: Vec<ScreeningResult>,
}

impl StudyImage {
    pub fn result(&self) -> Option<&ScreeningResult> {
        match &self.state {
            ImageState::Complete { result } => Some(result),
            ImageState::AwaitingMdDecision { .. } => None,
        }
    }

    pub fn attempt(&self) -> u8 {
        match &self.state {
            ImageState::Complete { result } => result.attempt,
            ImageState::AwaitingMdDecision { pending } => pending.attempt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub study_id: String,
    pub created_at_ms: u64,
    pub status: StudyStatus,
    /// Submission order.
    pub images: Vec<StudyImage>,
}

impl Study {
    pub fn image(&self, image_id: &str) -> Option<&StudyImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    fn image_mut(&mut self, image_id: &str) -> Option<&mut StudyImage> {
        self.images.iter_mut().find(|i| i.image_id == image_id)
    }

    fn record(&mut self, image_id: &str, state: ImageState, preprocess: Option<Provenance>) {
        match self.image_mut(image_id) {
            Some(img) => {
                let previous = std::mem::replace(&mut img.state, state);
                if let ImageState::Complete { result } = previous {
                    img.retaken.push(result);
                }
                if preprocess.is_some() {
                    img.preprocess = preprocess;
                }
            }
            None => self.images.push(StudyImage {
                image_id: image_id.to_string(),
                state,
                preprocess,
                retaken: Vec::new(),
            }),
        }
    }
}

/// Reviewer's view of image quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityVerdict {
    Gradable,
    Ungradable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub feedback_id: String,
    pub study_id: String,
    pub image_id: String,
    pub reviewer: String,
    #[serde(default)]
    pub suggested_quality: Option<QualityVerdict>,
    pub suggested_grade: Grade,
    #[serde(default)]
    pub note: String,
    /// Client-supplied time, kept verbatim.
    #[serde(default)]
    pub timestamp: Option<String>,
    pub received_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    StudyCreated { study_id: String, created_at_ms: u64 },
    StudyClosed { study_id: String },
    ScreeningPending {
        study_id: String,
        pending: PendingScreening,
        #[serde(default)]
        preprocess: Option<Provenance>,
    },
    /// Either a fresh screening or the resolution of a pending one.
    ScreeningCompleted {
        study_id: String,
        result: ScreeningResult,
        #[serde(default)]
        preprocess: Option<Provenance>,
    },
    FeedbackAdded { entry: FeedbackEntry },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub studies: BTreeMap<String, Study>,
    pub feedback: Vec<FeedbackEntry>,
}

impl State {
    /// Events are validated before they are committed, so applying one
    /// never fails; an event naming an unknown study is ignored.
    pub fn apply(&mut self, event: Event) {
        match event {
            Event::StudyCreated { study_id, created_at_ms } => {
                self.studies.entry(study_id.clone()).or_insert(Study {
                    study_id,
                    created_at_ms,
                    status: StudyStatus::Open,
                    images: Vec::new(),
                });
            }
            Event::StudyClosed { study_id } => {
                if let Some(s) = self.studies.get_mut(&study_id) {
                    s.status = StudyStatus::Closed;
                }
            }
            Event::ScreeningPending {
                study_id,
                pending,
                preprocess,
            } => {
                if let Some(s) = self.studies.get_mut(&study_id) {
                    let id = pending.image_id.clone();
                    s.record(&id, ImageState::AwaitingMdDecision { pending }, preprocess);
                }
            }
            Event::ScreeningCompleted {
                study_id,
                result,
                preprocess,
            } => {
                if let Some(s) = self.studies.get_mut(&study_id) {
                    let id = result.image_id.clone();
                    let img = s.image_mut(&id);
                    // Resolving a pending screening replaces it; a new
                    // attempt archives the previous result.
                    if let Some(img) = img.filter(|i| matches!(i.state, ImageState::AwaitingMdDecision { .. })) {
                        img.state = ImageState::Complete { result };
                    } else {
                        s.record(&id, ImageState::Complete { result }, preprocess);
                    }
                }
            }
            Event::FeedbackAdded { entry } => self.feedback.push(entry),
        }
    }
}

/// A log line: the event and its position in the history.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    seq: u64,
    #[serde(flatten)]
    event: Event,
}

#[derive(Serialize)]
struct SnapshotRef<'a> {
    seq: u64,
    state: &'a State,
}

#[derive(Debug, Default, Deserialize)]
struct Snapshot {
    /// Last event folded into `state`.
    seq: u64,
    state: State,
}

/// In-memory state, optionally backed by a data directory.
#[derive(Debug, Default)]
pub struct Store {
    state: State,
    seq: u64,
    dir: Option<PathBuf>,
    log: Option<File>,
    since_snapshot: usize,
}

impl Store {
    pub fn in_memory() -> Self {
        Store::default()
    }

    /// Load `dir/snapshot.json`, replay `dir/events.jsonl` on top, and keep
    /// appending to the log. The directory is created if missing.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StoreError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let snap = dir.join(SNAPSHOT);
        let Snapshot { seq: snap_seq, mut state } = match fs::read(&snap) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|source| StoreError::Corrupt {
                path: snap.clone(),
                line: 1,
                source,
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Snapshot::default(),
            Err(e) => return Err(io(&snap)(e)),
        };
        let log_path = dir.join(LOG);
        let (mut seq, mut replayed) = (snap_seq, 0);
        if log_path.exists() {
            let reader = BufReader::new(File::open(&log_path).map_err(io(&log_path))?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io(&log_path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: Record = serde_json::from_str(&line).map_err(|source| StoreError::Corrupt {
                    path: log_path.clone(),
                    line: i + 1,
                    source,
                })?;
                // Already in the snapshot: the process stopped between
                // writing it and truncating the log.
                if record.seq <= snap_seq {
                    continue;
                }
                seq = record.seq;
                state.apply(record.event);
                replayed += 1;
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io(&log_path))?;
        Ok(Store {
            state,
            seq,
            dir: Some(dir.to_path_buf()),
            log: Some(log),
            since_snapshot: replayed,
        })
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    /// Append to the log, then apply.
    pub fn commit(&mut self, event: Event) -> Result<(), StoreError> {
        self.seq += 1;
        if let (Some(log), Some(dir)) = (self.log.as_mut(), self.dir.as_ref()) {
            let record = Record { seq: self.seq, event };
            let mut line = serde_json::to_vec(&record).expect("events serialise");
            line.push(b'\n');
            log.write_all(&line)
                .and_then(|_| log.flush())
                .map_err(|source| StoreError::Io {
                    path: dir.join(LOG),
                    source,
                })?;
            self.since_snapshot += 1;
            self.state.apply(record.event);
        } else {
            self.state.apply(event);
        }
        if self.since_snapshot >= SNAPSHOT_EVERY {
            self.flush()?;
        }
        Ok(())
    }

    /// Write the snapshot atomically (temp file, fsync, rename), then
    /// truncate the log. Log records at or below the snapshot's sequence
    /// number are skipped on load, so a crash in between loses nothing and
    /// duplicates nothing.
    pub fn flush(&mut self) -> Result<(), StoreError> {
        let Some(dir) = self.dir.clone() else { return Ok(()) };
        let io = |path: PathBuf| move |source| StoreError::Io { path, source };
        let tmp = dir.join(format!("{SNAPSHOT}.tmp"));
        let snap = dir.join(SNAPSHOT);
        let bytes = serde_json::to_vec(&SnapshotRef {
            seq: self.seq,
            state: &self.state,
        })
        .expect("state serialises");
        let mut f = File::create(&tmp).map_err(io(tmp.clone()))?;
        f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(io(tmp.clone()))?;
        fs::rename(&tmp, &snap).map_err(io(snap))?;
        let log_path = dir.join(LOG);
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&log_path)
            .map_err(io(log_path.clone()))?;
        log.sync_all().map_err(io(log_path.clone()))?;
        self.log = Some(
            OpenOptions::new()
                .append(true)
                .open(&log_path)
                .map_err(io(log_path))?,
        );
        self.since_snapshot = 0;
        Ok(())
    }
}
