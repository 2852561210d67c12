//! CSV reports: current annotations, and per burrow-day processing status.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::annotation::{format_utc, Annotation};
use crate::naming::{parse_date_code, BurrowId, RecordingId};
use crate::schedule::BACKLOG_DEADLINE_HOURS;

pub const ANNOTATION_REPORT_HEADER: &str =
    "annotation_id,recording_id,start_frame,end_frame,event,animal_id,author,modified_utc";
pub const STATUS_FILE_NAME: &str = "status.csv";
pub const STATUS_LOG_HEADER: &str = "burrow_id,date,stage,items,completed_utc";
pub const STATUS_REPORT_HEADER: &str = "burrow_id,date,stage,items,first_utc,last_utc,backlog";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("status log line {line}: {reason}")]
    BadStatus { line: u64, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReportFilter {
    pub burrow: Option<BurrowId>,
    pub date: Option<NaiveDate>,
    pub event: Option<String>,
    pub animal: Option<String>,
}

impl ReportFilter {
    pub fn matches(&self, a: &Annotation) -> bool {
        let Ok(rec) = a.recording_id.parse::<RecordingId>() else {
            return false;
        };
        self.burrow.as_ref().is_none_or(|b| *b == rec.burrow_id)
            && self.date.is_none_or(|d| d == rec.date)
            && self.event.as_ref().is_none_or(|e| *e == a.event)
            && self.animal.as_ref().is_none_or(|x| a.animal_id.as_ref() == Some(x))
    }
}

/// Header plus one row per matching annotation, sorted by
/// (recording_id, start_frame); input is the folded current state.
pub fn annotation_report(annotations: &[Annotation], filter: &ReportFilter) -> String {
    let mut rows: Vec<&Annotation> = annotations.iter().filter(|a| filter.matches(a)).collect();
    rows.sort_by(|a, b| (&a.recording_id, a.start_frame).cmp(&(&b.recording_id, b.start_frame)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ANNOTATION_REPORT_HEADER.split(',')).expect("in-memory write");
    for a in rows {
        w.write_record([
            a.annotation_id.as_str(),
            &a.recording_id,
            &a.start_frame.to_string(),
            &a.end_frame.to_string(),
            &a.event,
            a.animal_id.as_deref().unwrap_or(""),
            &a.author,
            &format_utc(&a.modified_utc),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 fields")
}

/// Pipeline stages in the order a burrow-day passes through them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Stage {
    Ingested,
    Segmented,
    Encoded,
    Verified,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ingested => "ingested",
            Stage::Segmented => "segmented",
            Stage::Encoded => "encoded",
            Stage::Verified => "verified",
        })
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ingested" => Ok(Stage::Ingested),
            "segmented" => Ok(Stage::Segmented),
            "encoded" => Ok(Stage::Encoded),
            "verified" => Ok(Stage::Verified),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatusRecord {
    pub burrow_id: BurrowId,
    pub date: NaiveDate,
    pub stage: Stage,
    /// Images, segments or videos handled by the stage.
    pub items: u64,
    pub completed_utc: DateTime<Utc>,
}

pub fn read_status_log<R: io::Read>(reader: R) -> Result<Vec<StatusRecord>, ReportError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for r in rdr.records() {
        let r = r?;
        let line = r.position().map_or(0, |p| p.line());
        let bad = |reason: String| ReportError::BadStatus { line, reason };
        if r.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", r.len())));
        }
        out.push(StatusRecord {
            burrow_id: BurrowId::new(&r[0]).map_err(|e| bad(e.to_string()))?,
            date: parse_date_code(&r[1]).map_err(|e| bad(e.to_string()))?,
            stage: r[2].parse().map_err(bad)?,
            items: r[3].parse().map_err(|_| bad(format!("bad item count {:?}", &r[3])))?,
            completed_utc: DateTime::parse_from_rfc3339(&r[4])
                .map_err(|_| bad(format!("bad timestamp {:?}", &r[4])))?
                .with_timezone(&Utc),
        });
    }
    Ok(out)
}

/// Append-only status log in a store directory.
pub struct StatusLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl StatusLog {
    pub fn new(dir: &Path) -> Self {
        StatusLog {
            path: dir.join(STATUS_FILE_NAME),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(&self) -> Result<Vec<StatusRecord>, ReportError> {
        match fs::File::open(&self.path) {
            Ok(f) => read_status_log(f),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(ReportError::Io {
                path: self.path.clone(),
                source: e,
            }),
        }
    }

    /// Appends the record unless its burrow-day already reached this stage or
    /// a later one. Returns whether it was written.
    pub fn record(&self, rec: &StatusRecord) -> Result<bool, ReportError> {
        let _guard = self.lock.lock().expect("status lock");
        let existing = self.read()?;
        let reached = existing
            .iter()
            .filter(|r| r.burrow_id == rec.burrow_id && r.date == rec.date)
            .map(|r| r.stage)
            .max();
        if reached.is_some_and(|s| s >= rec.stage) {
            return Ok(false);
        }
        let io_err = |source| ReportError::Io {
            path: self.path.clone(),
            source,
        };
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        if file.metadata().map_err(io_err)?.len() == 0 {
            w.write_record(STATUS_LOG_HEADER.split(','))?;
        }
        w.write_record([
            rec.burrow_id.to_string(),
            rec.date.format("%Y%m%d").to_string(),
            rec.stage.to_string(),
            rec.items.to_string(),
            format_utc(&rec.completed_utc),
        ])?;
        let bytes = w.into_inner().map_err(|e| io_err(e.into_error()))?;
        file.write_all(&bytes).and_then(|_| file.sync_data()).map_err(io_err)?;
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BurrowDayStatus {
    pub burrow_id: BurrowId,
    pub date: NaiveDate,
    pub stage: Stage,
    pub items: u64,
    pub first_utc: DateTime<Utc>,
    pub last_utc: DateTime<Utc>,
    pub backlog: bool,
}

/// Latest stage of each burrow-day. A day is in backlog when its first
/// record is older than the deadline and it has not been encoded yet.
pub fn summarize_status(records: &[StatusRecord], now: DateTime<Utc>) -> Vec<BurrowDayStatus> {
    let mut days: BTreeMap<(BurrowId, NaiveDate), BurrowDayStatus> = BTreeMap::new();
    for r in records {
        let e = days
            .entry((r.burrow_id.clone(), r.date))
            .or_insert_with(|| BurrowDayStatus {
                burrow_id: r.burrow_id.clone(),
                date: r.date,
                stage: r.stage,
                items: r.items,
                first_utc: r.completed_utc,
                last_utc: r.completed_utc,
                backlog: false,
            });
        e.first_utc = e.first_utc.min(r.completed_utc);
        if r.stage > e.stage || (r.stage == e.stage && r.completed_utc >= e.last_utc) {
            e.stage = r.stage;
            e.items = r.items;
            e.last_utc = r.completed_utc;
        }
    }
    let deadline = Duration::seconds((BACKLOG_DEADLINE_HOURS * 3600.0) as i64);
    days.into_values()
        .map(|mut d| {
            d.backlog = d.stage < Stage::Encoded && now - d.first_utc > deadline;
            d
        })
        .collect()
}

pub fn status_report(records: &[StatusRecord], now: DateTime<Utc>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(STATUS_REPORT_HEADER.split(',')).expect("in-memory write");
    for d in summarize_status(records, now) {
        w.write_record([
            d.burrow_id.to_string(),
            d.date.format("%Y%m%d").to_string(),
            d.stage.to_string(),
            d.items.to_string(),
            format_utc(&d.first_utc),
            format_utc(&d.last_utc),
            (d.backlog as u8).to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 fields")
}
