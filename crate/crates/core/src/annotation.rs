//! Annotation store: event schema, append-only CSV log of annotation
//! revisions, cached re-identification suggestions and frame extraction for
//! the annotation service.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::SystemTime;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::naming::{RecordingId, CAPTURE_CADENCE_SECS, SCHEDULE_START};
use crate::reid::{read_suggestions, write_suggestions, Ranked, ReidError, SuggestionRecord};
use crate::segmenter::Segment;
use crate::videopack::{extract_frame_jpeg, probe, video_file_name, Encoder, VideoError};

/// Event every imported draft segment carries. Always part of the schema.
pub const ANIMAL_PRESENT: &str = "animal-present";
pub const LOG_FILE_NAME: &str = "annotations.csv";
pub const SUGGESTIONS_DIR: &str = "suggestions";
pub const LOG_HEADER: &str =
    "annotation_id,recording_id,start_frame,end_frame,event,animal_id,author,modified_utc,revision,tombstone";
pub const AUTO_AUTHOR: &str = "auto";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("line {line}: expected `event <name> [id-required]`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate event {name:?}")]
    Duplicate { line: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EventDef {
    pub name: String,
    pub id_required: bool,
}

/// Events an annotator may assign, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct EventSchema {
    pub events: Vec<EventDef>,
}

impl EventSchema {
    /// Parses `event <name> [id-required]` lines; blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self, SchemaError> {
        let mut events: Vec<EventDef> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let malformed = || SchemaError::Malformed {
                line,
                text: raw.to_string(),
            };
            let tokens: Vec<&str> = content.split_whitespace().collect();
            let (name, id_required) = match tokens.as_slice() {
                ["event", name] => (*name, false),
                ["event", name, "id-required"] => (*name, true),
                _ => return Err(malformed()),
            };
            if name.contains(',') || name.contains('"') {
                return Err(malformed());
            }
            if events.iter().any(|e| e.name == name) {
                return Err(SchemaError::Duplicate {
                    line,
                    name: name.to_string(),
                });
            }
            events.push(EventDef {
                name: name.to_string(),
                id_required,
            });
        }
        Ok(EventSchema { events })
    }

    pub fn from_path(path: &Path) -> Result<Self, AnnotationError> {
        let text = fs::read_to_string(path).map_err(|e| AnnotationError::io(path, e))?;
        Ok(Self::parse(&text)?)
    }

    /// Looks an event up, falling back to the implicit `animal-present`.
    pub fn get(&self, name: &str) -> Option<EventDef> {
        self.events.iter().find(|e| e.name == name).cloned().or_else(|| {
            (name == ANIMAL_PRESENT).then(|| EventDef {
                name: ANIMAL_PRESENT.to_string(),
                id_required: false,
            })
        })
    }

    /// Schema events plus `animal-present` if the file did not define it.
    pub fn effective_events(&self) -> Vec<EventDef> {
        let mut all = self.events.clone();
        if !all.iter().any(|e| e.name == ANIMAL_PRESENT) {
            all.insert(0, self.get(ANIMAL_PRESENT).expect("implicit event"));
        }
        all
    }
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("invalid annotation: {0}")]
    Invalid(String),
    #[error("annotation {0:?} not found")]
    NotFound(String),
    #[error("log line {line}: {reason}")]
    CorruptLog { line: u64, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Reid(#[from] ReidError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error("frame {index} out of range: recording has {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("no video for recording {0}")]
    MissingVideo(String),
}

impl AnnotationError {
    fn io(path: &Path, source: io::Error) -> Self {
        AnnotationError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// What a client submits; the store assigns revision and timestamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationDraft {
    pub annotation_id: String,
    pub recording_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub event: String,
    #[serde(default)]
    pub animal_id: Option<String>,
    pub author: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotation_id: String,
    pub recording_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub event: String,
    pub animal_id: Option<String>,
    pub author: String,
    pub modified_utc: DateTime<Utc>,
    pub revision: u64,
}

impl Annotation {
    pub fn recording(&self) -> RecordingId {
        self.recording_id.parse().expect("validated on write")
    }
}

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | ':'))
}

/// Checks a draft against the schema and the field invariants.
pub fn validate_draft(draft: &AnnotationDraft, schema: &EventSchema) -> Result<(), AnnotationError> {
    let invalid = |m: String| Err(AnnotationError::Invalid(m));
    if !is_token(&draft.annotation_id) {
        return invalid(format!("bad annotation_id {:?}", draft.annotation_id));
    }
    if draft.recording_id.parse::<RecordingId>().is_err() {
        return invalid(format!("bad recording_id {:?}", draft.recording_id));
    }
    if draft.start_frame > draft.end_frame {
        return invalid(format!("start {} > end {}", draft.start_frame, draft.end_frame));
    }
    let Some(event) = schema.get(&draft.event) else {
        return invalid(format!("unknown event {:?}", draft.event));
    };
    match &draft.animal_id {
        None if event.id_required => return invalid(format!("event {:?} requires an animal_id", event.name)),
        Some(id) if !is_token(id) => return invalid(format!("bad animal_id {id:?}")),
        _ => {}
    }
    if draft.author.trim().is_empty() || draft.author.contains(['\n', '\r']) {
        return invalid("author must be a non-empty single line".into());
    }
    Ok(())
}

/// One line of the log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub annotation: Annotation,
    pub tombstone: bool,
}

impl LogRecord {
    fn fields(&self) -> [String; 10] {
        let a = &self.annotation;
        [
            a.annotation_id.clone(),
            a.recording_id.clone(),
            a.start_frame.to_string(),
            a.end_frame.to_string(),
            a.event.clone(),
            a.animal_id.clone().unwrap_or_default(),
            a.author.clone(),
            format_utc(&a.modified_utc),
            a.revision.to_string(),
            (self.tombstone as u8).to_string(),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self, String> {
        if r.len() != 10 {
            return Err(format!("expected 10 fields, found {}", r.len()));
        }
        let num = |i: usize| r[i].parse::<u64>().map_err(|_| format!("bad number {:?}", &r[i]));
        let modified_utc = DateTime::parse_from_rfc3339(&r[7])
            .map_err(|_| format!("bad timestamp {:?}", &r[7]))?
            .with_timezone(&Utc);
        let tombstone = match &r[9] {
            "0" => false,
            "1" => true,
            other => return Err(format!("bad tombstone flag {other:?}")),
        };
        Ok(LogRecord {
            annotation: Annotation {
                annotation_id: r[0].to_string(),
                recording_id: r[1].to_string(),
                start_frame: num(2)? as usize,
                end_frame: num(3)? as usize,
                event: r[4].to_string(),
                animal_id: (!r[5].is_empty()).then(|| r[5].to_string()),
                author: r[6].to_string(),
                modified_utc,
                revision: num(8)?,
            },
            tombstone,
        })
    }
}

pub fn format_utc(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Reads every record of a log, in file order.
pub fn read_log<R: Read>(reader: R) -> Result<Vec<LogRecord>, AnnotationError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != LOG_HEADER {
        return Err(AnnotationError::CorruptLog {
            line: 1,
            reason: format!("unexpected header {:?}", header.join(",")),
        });
    }
    let mut out = Vec::new();
    for r in rdr.records() {
        let r = r?;
        let line = r.position().map_or(0, |p| p.line());
        out.push(LogRecord::from_record(&r).map_err(|reason| AnnotationError::CorruptLog { line, reason })?);
    }
    Ok(out)
}

/// Latest revision per id; tombstoned ids map to `None`.
pub type FoldedState = BTreeMap<String, (u64, Option<Annotation>)>;

/// Current state as a pure fold over the records: the highest revision of
/// each id wins, and a tombstone hides the annotation.
pub fn fold_log<'a>(records: impl IntoIterator<Item = &'a LogRecord>) -> FoldedState {
    let mut state = FoldedState::new();
    for rec in records {
        let rev = rec.annotation.revision;
        let slot = state.entry(rec.annotation.annotation_id.clone()).or_insert((0, None));
        if rev > slot.0 {
            *slot = (rev, (!rec.tombstone).then(|| rec.annotation.clone()));
        }
    }
    state
}

struct LogWriter {
    file: File,
    path: PathBuf,
    state: FoldedState,
}

/// Append-only annotation log under `dir/annotations.csv`. All writes go
/// through one lock; readers see a consistent folded snapshot.
pub struct AnnotationStore {
    dir: PathBuf,
    schema: EventSchema,
    inner: RwLock<LogWriter>,
}

impl AnnotationStore {
    /// Opens (creating if needed) the store in `dir`. A torn final line left
    /// by a crash mid-append is discarded: it was never acknowledged.
    pub fn open(dir: &Path, schema: EventSchema) -> Result<Self, AnnotationError> {
        fs::create_dir_all(dir).map_err(|e| AnnotationError::io(dir, e))?;
        let path = dir.join(LOG_FILE_NAME);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| AnnotationError::io(&path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| AnnotationError::io(&path, e))?;
        if bytes.is_empty() {
            file.write_all(format!("{LOG_HEADER}\n").as_bytes())
                .and_then(|_| file.sync_data())
                .map_err(|e| AnnotationError::io(&path, e))?;
            bytes = format!("{LOG_HEADER}\n").into_bytes();
        } else if !bytes.ends_with(b"\n") {
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            log::warn!("{}: dropping {} bytes of torn final record", path.display(), bytes.len() - keep);
            file.set_len(keep as u64).map_err(|e| AnnotationError::io(&path, e))?;
            file.seek(SeekFrom::End(0)).map_err(|e| AnnotationError::io(&path, e))?;
            bytes.truncate(keep);
        }
        let records = read_log(bytes.as_slice())?;
        let state = fold_log(&records);
        Ok(AnnotationStore {
            dir: dir.to_path_buf(),
            schema,
            inner: RwLock::new(LogWriter { file, path, state }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn schema(&self) -> &EventSchema {
        &self.schema
    }

    fn append(w: &mut LogWriter, rec: &LogRecord) -> Result<(), AnnotationError> {
        let mut buf = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        buf.write_record(rec.fields())?;
        let bytes = buf.into_inner().map_err(|e| AnnotationError::io(&w.path, e.into_error()))?;
        w.file
            .write_all(&bytes)
            .and_then(|_| w.file.sync_data())
            .map_err(|e| AnnotationError::io(&w.path, e))?;
        let slot = w.state.entry(rec.annotation.annotation_id.clone()).or_insert((0, None));
        *slot = (rec.annotation.revision, (!rec.tombstone).then(|| rec.annotation.clone()));
        Ok(())
    }

    pub fn upsert(&self, draft: AnnotationDraft) -> Result<Annotation, AnnotationError> {
        self.upsert_at(draft, Utc::now())
    }

    /// Validates and appends a new revision of `draft.annotation_id`.
    pub fn upsert_at(&self, draft: AnnotationDraft, now: DateTime<Utc>) -> Result<Annotation, AnnotationError> {
        validate_draft(&draft, &self.schema)?;
        let mut w = self.inner.write().expect("store lock");
        let revision = w.state.get(&draft.annotation_id).map_or(0, |s| s.0) + 1;
        let annotation = Annotation {
            annotation_id: draft.annotation_id,
            recording_id: draft.recording_id,
            start_frame: draft.start_frame,
            end_frame: draft.end_frame,
            event: draft.event,
            animal_id: draft.animal_id,
            author: draft.author,
            modified_utc: now.with_nanosecond(0).unwrap_or(now),
            revision,
        };
        Self::append(
            &mut w,
            &LogRecord {
                annotation: annotation.clone(),
                tombstone: false,
            },
        )?;
        Ok(annotation)
    }

    pub fn delete(&self, annotation_id: &str, author: &str) -> Result<(), AnnotationError> {
        self.delete_at(annotation_id, author, Utc::now())
    }

    /// Appends a tombstone revision; deleting an absent id is an error.
    pub fn delete_at(&self, annotation_id: &str, author: &str, now: DateTime<Utc>) -> Result<(), AnnotationError> {
        let mut w = self.inner.write().expect("store lock");
        let Some((rev, Some(current))) = w.state.get(annotation_id).cloned() else {
            return Err(AnnotationError::NotFound(annotation_id.to_string()));
        };
        let mut annotation = current;
        annotation.revision = rev + 1;
        annotation.author = author.to_string();
        annotation.modified_utc = now.with_nanosecond(0).unwrap_or(now);
        Self::append(
            &mut w,
            &LogRecord {
                annotation,
                tombstone: true,
            },
        )
    }

    pub fn get(&self, annotation_id: &str) -> Option<Annotation> {
        let r = self.inner.read().expect("store lock");
        r.state.get(annotation_id).and_then(|s| s.1.clone())
    }

    /// Live annotations ordered by (recording_id, start_frame, annotation_id).
    pub fn current(&self) -> Vec<Annotation> {
        let r = self.inner.read().expect("store lock");
        let mut all: Vec<Annotation> = r.state.values().filter_map(|s| s.1.clone()).collect();
        sort_annotations(&mut all);
        all
    }

    pub fn for_recording(&self, recording_id: &str) -> Vec<Annotation> {
        self.current()
            .into_iter()
            .filter(|a| a.recording_id == recording_id)
            .collect()
    }

    /// Recordings with annotations or cached suggestions.
    pub fn recordings(&self) -> Result<BTreeSet<String>, AnnotationError> {
        let mut ids: BTreeSet<String> = self.current().into_iter().map(|a| a.recording_id).collect();
        let dir = self.dir.join(SUGGESTIONS_DIR);
        if dir.is_dir() {
            for entry in fs::read_dir(&dir).map_err(|e| AnnotationError::io(&dir, e))? {
                let entry = entry.map_err(|e| AnnotationError::io(&dir, e))?;
                if let Some(stem) = entry.file_name().to_str().and_then(|n| n.strip_suffix(".csv")) {
                    if stem.parse::<RecordingId>().is_ok() {
                        ids.insert(stem.to_string());
                    }
                }
            }
        }
        Ok(ids)
    }

    /// Imports machine-drafted segments as `animal-present` annotations with
    /// ids `auto-{recording}-{start}-{end}`. Ids seen before, live or deleted,
    /// are left alone so human edits survive a rerun. Returns how many were added.
    pub fn import_segments(&self, segments: &[Segment], now: DateTime<Utc>) -> Result<usize, AnnotationError> {
        let mut added = 0;
        for s in segments {
            let id = draft_annotation_id(s);
            if self.inner.read().expect("store lock").state.contains_key(&id) {
                continue;
            }
            self.upsert_at(
                AnnotationDraft {
                    annotation_id: id,
                    recording_id: s.recording_id.clone(),
                    start_frame: s.start_frame,
                    end_frame: s.end_frame,
                    event: ANIMAL_PRESENT.to_string(),
                    animal_id: None,
                    author: AUTO_AUTHOR.to_string(),
                },
                now,
            )?;
            added += 1;
        }
        Ok(added)
    }

    fn suggestions_path(&self, recording_id: &str) -> PathBuf {
        self.dir.join(SUGGESTIONS_DIR).join(format!("{recording_id}.csv"))
    }

    /// Replaces the cached suggestions of one recording (a derived cache,
    /// not part of the append-only log).
    pub fn store_suggestions(&self, recording_id: &str, records: &[SuggestionRecord]) -> Result<(), AnnotationError> {
        let path = self.suggestions_path(recording_id);
        let dir = path.parent().expect("suggestions dir");
        fs::create_dir_all(dir).map_err(|e| AnnotationError::io(dir, e))?;
        let tmp = dir.join(format!(".{recording_id}.{}.tmp", std::process::id()));
        let file = File::create(&tmp).map_err(|e| AnnotationError::io(&tmp, e))?;
        write_suggestions(file, records)?;
        fs::rename(&tmp, &path).map_err(|e| AnnotationError::io(&path, e))?;
        Ok(())
    }

    pub fn load_suggestions(&self, recording_id: &str) -> Result<Option<Vec<SuggestionRecord>>, AnnotationError> {
        let path = self.suggestions_path(recording_id);
        match File::open(&path) {
            Ok(f) => Ok(Some(read_suggestions(f)?)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(AnnotationError::io(&path, e)),
        }
    }

    /// Top-k suggestions for the frame, taken from the nearest sampled frame
    /// inside an annotated segment containing `frame_index`. `detection`
    /// picks an animal when several were identified there (default: the first).
    pub fn get_suggestions(
        &self,
        recording_id: &str,
        frame_index: usize,
        detection: Option<usize>,
    ) -> Result<SuggestionResponse, AnnotationError> {
        let Some(records) = self.load_suggestions(recording_id)? else {
            return Ok(SuggestionResponse::unavailable());
        };
        let segments: Vec<(usize, usize)> = self
            .for_recording(recording_id)
            .iter()
            .filter(|a| a.start_frame <= frame_index && frame_index <= a.end_frame)
            .map(|a| (a.start_frame, a.end_frame))
            .collect();
        let in_segment = |f: usize| segments.iter().any(|&(s, e)| s <= f && f <= e);
        let best = records
            .iter()
            .filter(|r| in_segment(r.frame_index))
            .filter(|r| detection.is_none_or(|d| r.detection == d))
            .min_by_key(|r| (r.frame_index.abs_diff(frame_index), r.frame_index, r.detection));
        Ok(match best {
            Some(r) => SuggestionResponse {
                available: true,
                sampled_frame: Some(r.frame_index),
                detection: Some(r.detection),
                suggestions: r.prediction.ranked.clone(),
            },
            None => SuggestionResponse {
                available: true,
                ..SuggestionResponse::unavailable()
            },
        })
    }
}

/// Deterministic id of an imported draft segment.
pub fn draft_annotation_id(s: &Segment) -> String {
    format!("auto-{}-{}-{}", s.recording_id, s.start_frame, s.end_frame)
}

pub fn sort_annotations(list: &mut [Annotation]) {
    list.sort_by(|a, b| {
        (&a.recording_id, a.start_frame, &a.annotation_id).cmp(&(&b.recording_id, b.start_frame, &b.annotation_id))
    });
}

/// Reads the current state of a store directory without taking the writer.
pub fn read_store_snapshot(dir: &Path) -> Result<Vec<Annotation>, AnnotationError> {
    let path = dir.join(LOG_FILE_NAME);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(AnnotationError::io(&path, e)),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete == 0 {
        return Ok(Vec::new());
    }
    let records = read_log(&bytes[..complete])?;
    let mut all: Vec<Annotation> = fold_log(&records).into_values().filter_map(|s| s.1).collect();
    sort_annotations(&mut all);
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuggestionResponse {
    /// False when the recording was never processed by re-identification.
    pub available: bool,
    pub sampled_frame: Option<usize>,
    pub detection: Option<usize>,
    pub suggestions: Vec<Ranked>,
}

impl SuggestionResponse {
    fn unavailable() -> Self {
        SuggestionResponse {
            available: false,
            sampled_frame: None,
            detection: None,
            suggestions: Vec::new(),
        }
    }
}

/// Nominal capture time of frame `n`: schedule start plus one cadence per frame.
pub fn nominal_capture_time(recording: &RecordingId, frame_index: usize) -> NaiveDateTime {
    recording.date.and_time(SCHEDULE_START) + chrono::Duration::seconds(CAPTURE_CADENCE_SECS * frame_index as i64)
}

const FRAME_CACHE_CAPACITY: usize = 512;

type VideoStamp = (PathBuf, u64, Option<SystemTime>);
type FrameKey = (String, usize);

#[derive(Default)]
struct FrameCache {
    frames: HashMap<FrameKey, (VideoStamp, Arc<Vec<u8>>)>,
    order: VecDeque<FrameKey>,
    counts: HashMap<String, (VideoStamp, usize)>,
}

/// Serves single frames of per-view day videos as JPEG, caching results so
/// repeated requests return identical bytes.
pub struct FrameService {
    videos_dir: PathBuf,
    encoder: Encoder,
    cache: Mutex<FrameCache>,
}

impl FrameService {
    pub fn new(videos_dir: PathBuf, encoder: Encoder) -> Self {
        FrameService {
            videos_dir,
            encoder,
            cache: Mutex::new(FrameCache::default()),
        }
    }

    pub fn video_path(&self, recording: &RecordingId) -> PathBuf {
        self.videos_dir.join(video_file_name(recording))
    }

    fn stamp(&self, recording: &RecordingId) -> Result<VideoStamp, AnnotationError> {
        let path = self.video_path(recording);
        match fs::metadata(&path) {
            Ok(m) => Ok((path, m.len(), m.modified().ok())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(AnnotationError::MissingVideo(recording.to_string())),
            Err(e) => Err(AnnotationError::io(&path, e)),
        }
    }

    pub fn frame_count(&self, recording: &RecordingId) -> Result<usize, AnnotationError> {
        let stamp = self.stamp(recording)?;
        let key = recording.to_string();
        if let Some((s, n)) = self.cache.lock().expect("frame cache").counts.get(&key) {
            if *s == stamp {
                return Ok(*n);
            }
        }
        let asset = probe(&stamp.0, &self.encoder)?;
        self.cache
            .lock()
            .expect("frame cache")
            .counts
            .insert(key, (stamp, asset.frames));
        Ok(asset.frames)
    }

    pub fn extract_frame(&self, recording: &RecordingId, index: usize) -> Result<Arc<Vec<u8>>, AnnotationError> {
        let frames = self.frame_count(recording)?;
        if index >= frames {
            return Err(AnnotationError::FrameOutOfRange { index, frames });
        }
        let stamp = self.stamp(recording)?;
        let key = (recording.to_string(), index);
        if let Some((s, bytes)) = self.cache.lock().expect("frame cache").frames.get(&key) {
            if *s == stamp {
                return Ok(bytes.clone());
            }
        }
        let bytes = Arc::new(extract_frame_jpeg(&stamp.0, index, &self.encoder)?);
        let mut cache = self.cache.lock().expect("frame cache");
        if let Some((s, existing)) = cache.frames.get(&key) {
            if *s == stamp {
                return Ok(existing.clone());
            }
        } else {
            cache.order.push_back(key.clone());
        }
        cache.frames.insert(key, (stamp, bytes.clone()));
        while cache.order.len() > FRAME_CACHE_CAPACITY {
            if let Some(old) = cache.order.pop_front() {
                cache.frames.remove(&old);
            }
        }
        Ok(bytes)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::reid::Prediction;
    use crate::segmenter::Source;
    use chrono::TimeZone;

    fn t(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_615_716_000 + secs, 0).unwrap()
    }

    fn draft(id: &str, event: &str, animal: Option<&str>) -> AnnotationDraft {
        AnnotationDraft {
            annotation_id: id.into(),
            recording_id: "B07-O-20210314".into(),
            start_frame: 10,
            end_frame: 20,
            event: event.into(),
            animal_id: animal.map(String::from),
            author: "grader1".into(),
        }
    }

    fn schema() -> EventSchema {
        EventSchema::parse("# events\nevent basking\nevent mating id-required\n").unwrap()
    }

    #[test]
    fn schema_parsing() {
        let s = schema();
        assert_eq!(s.events.len(), 2);
        assert!(!s.events[0].id_required);
        assert!(s.events[1].id_required);
        assert_eq!(EventSchema::parse("").unwrap().events.len(), 0);
        let err = EventSchema::parse("event basking\n\nevent basking").unwrap_err();
        assert_eq!(
            err,
            SchemaError::Duplicate {
                line: 3,
                name: "basking".into()
            }
        );
        assert!(err.to_string().contains("basking"));
        assert!(matches!(
            EventSchema::parse("event a b c"),
            Err(SchemaError::Malformed { line: 1, .. })
        ));
        assert!(matches!(EventSchema::parse("evnt a"), Err(SchemaError::Malformed { .. })));
        assert!(s.get(ANIMAL_PRESENT).is_some());
        assert_eq!(s.effective_events().len(), 3);
    }

    #[test]
    fn upsert_edit_delete() {
        let dir = tempfile::tempdir().unwrap();
        let store = AnnotationStore::open(dir.path(), schema()).unwrap();
        let a = store.upsert_at(draft("a1", "basking", None), t(0)).unwrap();
        assert_eq!(a.revision, 1);
        assert_eq!(store.get("a1"), Some(a));
        let mut d = draft("a1", "mating", Some("T04"));
        d.end_frame = 30;
        let b = store.upsert_at(d, t(5)).unwrap();
        assert_eq!(b.revision, 2);
        assert_eq!(store.get("a1").unwrap().end_frame, 30);

        let err = store.upsert_at(draft("a2", "mating", None), t(6)).unwrap_err();
        assert!(matches!(err, AnnotationError::Invalid(_)));
        assert!(store.get("a2").is_none());
        assert!(store.upsert_at(draft("a3", "dancing", None), t(6)).is_err());
        let mut backwards = draft("a4", "basking", None);
        backwards.start_frame = 50;
        assert!(store.upsert_at(backwards, t(6)).is_err());

        store.delete_at("a1", "grader2", t(9)).unwrap();
        assert!(store.get("a1").is_none());
        assert!(matches!(store.delete_at("a1", "x", t(9)), Err(AnnotationError::NotFound(_))));
        let again = store.upsert_at(draft("a1", "basking", None), t(10)).unwrap();
        assert_eq!(again.revision, 4);

        drop(store);
        let log = fs::read_to_string(dir.path().join(LOG_FILE_NAME)).unwrap();
        assert_eq!(log.lines().count(), 5);
        assert!(log.starts_with(LOG_HEADER));
        let reopened = AnnotationStore::open(dir.path(), schema()).unwrap();
        assert_eq!(reopened.get("a1"), Some(again));
        assert_eq!(read_store_snapshot(dir.path()).unwrap(), reopened.current());
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = AnnotationStore::open(dir.path(), schema()).unwrap();
            store.upsert_at(draft("a1", "basking", None), t(0)).unwrap();
        }
        let path = dir.path().join(LOG_FILE_NAME);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"a2,B07-O-20210314,1,").unwrap();
        drop(f);
        let store = AnnotationStore::open(dir.path(), schema()).unwrap();
        assert_eq!(store.current().len(), 1);
        store.upsert_at(draft("a2", "basking", None), t(1)).unwrap();
        let reopened = AnnotationStore::open(dir.path(), schema()).unwrap();
        assert_eq!(reopened.current().len(), 2);
    }

    #[test]
    fn import_is_idempotent_and_preserves_edits() {
        let dir = tempfile::tempdir().unwrap();
        let store = AnnotationStore::open(dir.path(), EventSchema::default()).unwrap();
        let segs = vec![
            Segment::new("B07-O-20210314", 5, 9, Source::Auto),
            Segment::new("B07-O-20210314", 40, 41, Source::Auto),
        ];
        assert_eq!(store.import_segments(&segs, t(0)).unwrap(), 2);
        let id = draft_annotation_id(&segs[0]);
        assert_eq!(id, "auto-B07-O-20210314-5-9");
        let mut d = draft(&id, ANIMAL_PRESENT, None);
        d.start_frame = 4;
        store.upsert_at(d, t(1)).unwrap();
        store.delete_at(&draft_annotation_id(&segs[1]), "grader1", t(2)).unwrap();
        assert_eq!(store.import_segments(&segs, t(3)).unwrap(), 0);
        let cur = store.current();
        assert_eq!(cur.len(), 1);
        assert_eq!(cur[0].start_frame, 4);
        assert_eq!(cur[0].author, "grader1");
    }

    #[test]
    fn suggestions_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let store = AnnotationStore::open(dir.path(), EventSchema::default()).unwrap();
        let rec = "B07-O-20210314";
        assert!(!store.get_suggestions(rec, 12, None).unwrap().available);

        store
            .import_segments(&[Segment::new(rec, 10, 30, Source::Auto)], t(0))
            .unwrap();
        let ranked = |first: &str| Prediction {
            ranked: [first, "T2", "T3", "T4", "T5"]
                .iter()
                .enumerate()
                .map(|(i, id)| Ranked {
                    individual_id: id.to_string(),
                    distance: i as f64 * 0.1,
                })
                .collect(),
        };
        let sug = |frame, det, first: &str| SuggestionRecord {
            recording_id: rec.into(),
            frame_index: frame,
            detection: det,
            prediction: ranked(first),
        };
        store
            .store_suggestions(rec, &[sug(10, 0, "A"), sug(20, 0, "B"), sug(20, 1, "C"), sug(30, 0, "D")])
            .unwrap();
        let r = store.get_suggestions(rec, 14, None).unwrap();
        assert!(r.available);
        assert_eq!(r.sampled_frame, Some(10));
        assert_eq!(r.suggestions.len(), 5);
        assert_eq!(r.suggestions[0].individual_id, "A");
        assert_eq!(store.get_suggestions(rec, 15, None).unwrap().suggestions[0].individual_id, "A");
        assert_eq!(store.get_suggestions(rec, 19, Some(1)).unwrap().suggestions[0].individual_id, "C");
        let outside = store.get_suggestions(rec, 31, None).unwrap();
        assert!(outside.available && outside.suggestions.is_empty());
        assert_eq!(store.recordings().unwrap().len(), 1);
    }

    #[test]
    fn capture_time_follows_cadence() {
        let rec: RecordingId = "B07-O-20210314".parse().unwrap();
        assert_eq!(nominal_capture_time(&rec, 0).to_string(), "2021-03-14 07:00:00");
        assert_eq!(nominal_capture_time(&rec, 12).to_string(), "2021-03-14 07:01:00");
    }
}
