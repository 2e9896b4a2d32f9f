//! Study state and its append-only store.
//!
//! The store is two line-delimited JSON files in the study directory,
//! `sessions.jsonl` and `annotations.jsonl`. Every accepted event is
//! appended and fsynced before the in-memory state changes, and opening a
//! study replays both files, so a killed service resumes exactly where the
//! store left off.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use mcfuse::evalkit::{ConfusionMatrix, DatasetManifest};
use mcfuse::explain::MarkBox;
use mcfuse::Class;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Rejection, StudyError};

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const DEFAULT_PER_SESSION: usize = 30;

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub study_id: String,
    pub manifest: PathBuf,
    pub store_dir: PathBuf,
    pub per_session: usize,
    pub seed: u64,
}

/// One pool image as the service knows it. Truth stays server-side.
#[derive(Debug, Clone)]
pub struct PoolImage {
    pub image_id: u64,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub truth: Class,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub participant: String,
    pub images: Vec<u64>,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub session_id: String,
    pub participant: String,
    pub image_id: u64,
    pub label: Class,
    pub boxes: Vec<MarkBox>,
    pub elapsed_ms: u64,
    pub ts: u64,
}

/// Body of an annotation submission.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub image_id: u64,
    pub label: Class,
    #[serde(default)]
    pub boxes: Vec<MarkBox>,
    #[serde(default)]
    pub elapsed_ms: u64,
}

/// Where a session stands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub session_id: String,
    /// Index of the next unanswered image; `total` when done.
    pub cursor: usize,
    pub total: usize,
    pub next_image: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Ack {
    pub session_id: String,
    pub image_id: u64,
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Default)]
struct State {
    sessions: Vec<Session>,
    by_id: HashMap<String, usize>,
    assigned: HashSet<u64>,
    answered: Vec<HashSet<u64>>,
    annotations: Vec<AnnotationRecord>,
}

impl State {
    fn add_session(&mut self, s: Session) {
        self.assigned.extend(s.images.iter().copied());
        self.by_id.insert(s.session_id.clone(), self.sessions.len());
        self.answered.push(HashSet::new());
        self.sessions.push(s);
    }

    fn add_annotation(&mut self, r: AnnotationRecord) {
        let k = self.by_id[&r.session_id];
        self.answered[k].insert(r.image_id);
        self.annotations.push(r);
    }

    fn progress(&self, k: usize) -> Progress {
        let s = &self.sessions[k];
        let cursor = s
            .images
            .iter()
            .position(|id| !self.answered[k].contains(id))
            .unwrap_or(s.images.len());
        Progress {
            session_id: s.session_id.clone(),
            cursor,
            total: s.images.len(),
            next_image: s.images.get(cursor).copied(),
        }
    }
}

struct Store {
    sessions: File,
    annotations: File,
}

fn append(file: &mut File, line: &impl Serialize) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec(line).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    file.write_all(&bytes)?;
    file.sync_data()
}

/// Reads every complete record; a torn final line from a crash mid-append
/// is cut off so later appends start on a clean line.
fn replay<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(File, Vec<T>), StudyError> {
    let mut file = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .map_err(|e| StudyError::io(path, e))?;
    let mut reader = BufReader::new(&file);
    let mut records = Vec::new();
    let mut good = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| StudyError::io(path, e))?;
        if n == 0 {
            break;
        }
        if !line.ends_with('\n') {
            log::warn!("{}: dropping torn final record ({n} bytes)", path.display());
            break;
        }
        let rec = serde_json::from_str(line.trim_end())
            .map_err(|e| StudyError::Corrupt(format!("{} after byte {good}: {e}", path.display())))?;
        records.push(rec);
        good += n as u64;
    }
    drop(reader);
    if file.metadata().map_err(|e| StudyError::io(path, e))?.len() != good {
        file.set_len(good).map_err(|e| StudyError::io(path, e))?;
        file.seek(SeekFrom::End(0)).map_err(|e| StudyError::io(path, e))?;
        file.sync_all().map_err(|e| StudyError::io(path, e))?;
    }
    Ok((file, records))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A running study. All mutations go through one writer lock, which also
/// owns the store files; readers share the state lock.
pub struct Study {
    config: StudyConfig,
    pool: Vec<PoolImage>,
    index: HashMap<u64, usize>,
    state: RwLock<State>,
    writer: Mutex<Store>,
}

impl std::fmt::Debug for Study {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Study")
            .field("study_id", &self.config.study_id)
            .field("pool", &self.pool.len())
            .finish_non_exhaustive()
    }
}

impl Study {
    /// Loads the pool from the manifest and replays the store.
    pub fn open(config: StudyConfig) -> Result<Self, StudyError> {
        if config.per_session == 0 {
            return Err(StudyError::Config("per_session must be positive".into()));
        }
        let manifest = DatasetManifest::load(&config.manifest)?;
        let mut pool = Vec::with_capacity(manifest.len());
        for r in manifest.records() {
            let path = manifest.resolve(r);
            let (width, height) =
                image::image_dimensions(&path).map_err(|e| StudyError::Config(format!("{}: {e}", path.display())))?;
            pool.push(PoolImage {
                image_id: r.image_id,
                path,
                width,
                height,
                truth: r.label,
            });
        }
        pool.sort_by_key(|p| p.image_id);
        let index = pool.iter().enumerate().map(|(i, p)| (p.image_id, i)).collect();

        std::fs::create_dir_all(&config.store_dir).map_err(|e| StudyError::io(&config.store_dir, e))?;
        let (sessions_file, sessions) = replay::<Session>(&config.store_dir.join(SESSIONS_FILE))?;
        let (annotations_file, annotations) = replay::<AnnotationRecord>(&config.store_dir.join(ANNOTATIONS_FILE))?;

        let mut state = State::default();
        for s in sessions {
            if s.images.iter().any(|id| state.assigned.contains(id)) {
                return Err(StudyError::Corrupt(format!(
                    "session {} reuses an image assigned earlier",
                    s.session_id
                )));
            }
            state.add_session(s);
        }
        for a in annotations {
            let k = *state
                .by_id
                .get(&a.session_id)
                .ok_or_else(|| StudyError::Corrupt(format!("annotation for unknown session {}", a.session_id)))?;
            if state.answered[k].contains(&a.image_id) || !state.sessions[k].images.contains(&a.image_id) {
                return Err(StudyError::Corrupt(format!(
                    "invalid stored annotation of image {} in session {}",
                    a.image_id, a.session_id
                )));
            }
            state.add_annotation(a);
        }
        log::info!(
            "study {}: {} pool images, {} sessions, {} annotations replayed",
            config.study_id,
            pool.len(),
            state.sessions.len(),
            state.annotations.len()
        );
        Ok(Study {
            config,
            pool,
            index,
            state: RwLock::new(state),
            writer: Mutex::new(Store {
                sessions: sessions_file,
                annotations: annotations_file,
            }),
        })
    }

    pub fn id(&self) -> &str {
        &self.config.study_id
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn pool(&self) -> &[PoolImage] {
        &self.pool
    }

    pub fn image(&self, image_id: u64) -> Option<&PoolImage> {
        self.index.get(&image_id).map(|&i| &self.pool[i])
    }

    pub fn unassigned(&self) -> usize {
        self.pool.len() - self.state.read().expect("state lock").assigned.len()
    }

    pub fn sessions(&self) -> Vec<Session> {
        self.state.read().expect("state lock").sessions.clone()
    }

    pub fn annotations(&self) -> Vec<AnnotationRecord> {
        self.state.read().expect("state lock").annotations.clone()
    }

    /// Draws `per_session` images without replacement from the unassigned
    /// pool. The draw depends only on the seed, the session's ordinal and
    /// the pool state.
    pub fn create_session(&self, participant: &str) -> Result<Session, StudyError> {
        if participant.trim().is_empty() {
            return Err(Rejection::BadRequest("participant must be non-empty".into()).into());
        }
        let mut store = self.writer.lock().expect("writer lock");
        let session = {
            let state = self.state.read().expect("state lock");
            let mut free: Vec<u64> = self
                .pool
                .iter()
                .map(|p| p.image_id)
                .filter(|id| !state.assigned.contains(id))
                .collect();
            let n = self.config.per_session;
            if free.len() < n {
                return Err(Rejection::StudyFull {
                    remaining: free.len(),
                    needed: n,
                }
                .into());
            }
            let ordinal = state.sessions.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(ordinal);
            let (chosen, _) = free.partial_shuffle(&mut rng, n);
            Session {
                session_id: format!("{ordinal:03}-{:012x}", rng.gen::<u64>() >> 16),
                participant: participant.trim().to_string(),
                images: chosen.to_vec(),
                created_at: now_ms(),
            }
        };
        append(&mut store.sessions, &session)
            .map_err(|e| StudyError::io(self.config.store_dir.join(SESSIONS_FILE), e))?;
        self.state.write().expect("state lock").add_session(session.clone());
        Ok(session)
    }

    pub fn session(&self, session_id: &str) -> Result<Session, StudyError> {
        let state = self.state.read().expect("state lock");
        let k = *state
            .by_id
            .get(session_id)
            .ok_or_else(|| Rejection::UnknownSession(session_id.into()))?;
        Ok(state.sessions[k].clone())
    }

    pub fn progress(&self, session_id: &str) -> Result<Progress, StudyError> {
        let state = self.state.read().expect("state lock");
        let k = *state
            .by_id
            .get(session_id)
            .ok_or_else(|| Rejection::UnknownSession(session_id.into()))?;
        Ok(state.progress(k))
    }

    /// Validates and durably records one answer.
    pub fn submit(&self, session_id: &str, sub: Submission) -> Result<Ack, StudyError> {
        let mut store = self.writer.lock().expect("writer lock");
        let record = {
            let state = self.state.read().expect("state lock");
            let k = *state
                .by_id
                .get(session_id)
                .ok_or_else(|| Rejection::UnknownSession(session_id.into()))?;
            let session = &state.sessions[k];
            if !session.images.contains(&sub.image_id) {
                return Err(Rejection::WrongImage {
                    session_id: session_id.into(),
                    image_id: sub.image_id,
                }
                .into());
            }
            if state.answered[k].contains(&sub.image_id) {
                return Err(Rejection::Duplicate {
                    session_id: session_id.into(),
                    image_id: sub.image_id,
                }
                .into());
            }
            let img = self.image(sub.image_id).expect("assigned images are in the pool");
            if let Some(b) = sub.boxes.iter().find(|b| !b.within(img.width, img.height)) {
                return Err(
                    Rejection::InvalidBox(format!("box {b:?} outside the {}x{} image", img.width, img.height)).into(),
                );
            }
            AnnotationRecord {
                session_id: session.session_id.clone(),
                participant: session.participant.clone(),
                image_id: sub.image_id,
                label: sub.label,
                boxes: sub.boxes,
                elapsed_ms: sub.elapsed_ms,
                ts: now_ms(),
            }
        };
        append(&mut store.annotations, &record)
            .map_err(|e| StudyError::io(self.config.store_dir.join(ANNOTATIONS_FILE), e))?;
        let mut state = self.state.write().expect("state lock");
        state.add_annotation(record);
        let k = state.by_id[session_id];
        Ok(Ack {
            session_id: session_id.into(),
            image_id: sub.image_id,
            answered: state.answered[k].len(),
            total: state.sessions[k].images.len(),
        })
    }

    /// Annotations against manifest truth.
    pub fn manual_confusion(&self) -> Result<ConfusionMatrix, StudyError> {
        let state = self.state.read().expect("state lock");
        if state.annotations.is_empty() {
            return Err(Rejection::EmptyStudy.into());
        }
        Ok(ConfusionMatrix::from_pairs(state.annotations.iter().map(|a| {
            (
                self.image(a.image_id).expect("annotated images are in the pool").truth,
                a.label,
            )
        })))
    }
}
