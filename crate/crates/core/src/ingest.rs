//! Copying SD-card dumps into the canonical archive tree.
//!
//! Capture metadata comes from a [`MetadataProvider`]. The shipped provider
//! reads a per-card CSV manifest (`filename,burrow,view,timestamp`); any other
//! source (for example an OCR backend reading the camera's info banner) only
//! has to implement the trait.
//!
//! Files land at `{archive}/{burrow}/{V}/{YYYYMMDD}/{canonical name}`. The
//! archive is append-only: byte-identical files are skipped, a same-named file
//! with different bytes is reported and never overwritten.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use chrono::NaiveDateTime;
use rayon::prelude::*;
use thiserror::Error;
use walkdir::WalkDir;

use crate::naming::{canonical_name, BurrowId, CaptureMeta, NameError, RecordingId, View};

pub const MANIFEST_HEADER: [&str; 4] = ["filename", "burrow", "view", "timestamp"];
pub const MANIFEST_FILE_NAME: &str = "manifest.csv";
const MANIFEST_TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetaError {
    #[error("missing filename")]
    MissingFilename,
    #[error("missing burrow")]
    MissingBurrow,
    #[error("missing view")]
    MissingView,
    #[error("missing timestamp")]
    MissingTimestamp,
    #[error(transparent)]
    Name(#[from] NameError),
    #[error("unparseable timestamp {0:?}")]
    BadTimestamp(String),
    #[error("malformed manifest record: {0}")]
    Malformed(String),
    #[error("no manifest entry for {0:?}")]
    NotInManifest(String),
    #[error("duplicate manifest entry for {0:?}")]
    DuplicateEntry(String),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read source {path}: {source}")]
    Source { path: PathBuf, source: io::Error },
    #[error("cannot prepare archive {path}: {source}")]
    Archive { path: PathBuf, source: io::Error },
    #[error("cannot read manifest {path}: {source}")]
    Manifest { path: PathBuf, source: csv::Error },
}

/// Metadata for one source image as reported by a provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureRecord {
    pub file_name: String,
    pub meta: CaptureMeta,
    /// Capture time outside 07:00–20:00. Kept, but worth a look: usually clock drift.
    pub out_of_schedule: bool,
}

/// Parses one manifest line, e.g. `IMG_0001.JPG,B07,O,2021-03-14 09:15:05`.
pub fn parse_capture_meta(line: &str) -> Result<CaptureRecord, MetaError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(line.as_bytes());
    let record = reader
        .records()
        .next()
        .ok_or(MetaError::MissingFilename)?
        .map_err(|e| MetaError::Malformed(e.to_string()))?;
    parse_manifest_record(&record)
}

fn parse_manifest_record(record: &csv::StringRecord) -> Result<CaptureRecord, MetaError> {
    let field = |i: usize| record.get(i).map(str::trim).filter(|s| !s.is_empty());
    let file_name = field(0).ok_or(MetaError::MissingFilename)?;
    let burrow = field(1).ok_or(MetaError::MissingBurrow)?;
    let view = field(2).ok_or(MetaError::MissingView)?;
    let stamp = field(3).ok_or(MetaError::MissingTimestamp)?;
    if record.len() > 4 {
        return Err(MetaError::Malformed(format!("expected 4 fields, found {}", record.len())));
    }
    let timestamp = NaiveDateTime::parse_from_str(stamp, MANIFEST_TIMESTAMP_FORMAT)
        .map_err(|_| MetaError::BadTimestamp(stamp.to_string()))?;
    let meta = CaptureMeta::new(BurrowId::new(burrow)?, View::from_code(view)?, timestamp);
    Ok(CaptureRecord {
        file_name: file_name.to_string(),
        out_of_schedule: !meta.in_schedule(),
        meta,
    })
}

/// Source of capture metadata for card images.
pub trait MetadataProvider: Sync {
    fn capture_meta(&self, source: &Path) -> Result<CaptureRecord, MetaError>;
}

/// Manifest-backed provider. Entries are keyed by file name; a bad manifest
/// line only poisons the image it describes.
#[derive(Debug, Default, Clone)]
pub struct ManifestProvider {
    entries: HashMap<String, Result<CaptureRecord, MetaError>>,
}

impl ManifestProvider {
    pub fn from_path(path: &Path) -> Result<Self, IngestError> {
        let file = fs::File::open(path).map_err(|e| IngestError::Manifest {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        Self::from_reader(file).map_err(|source| IngestError::Manifest {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_reader<R: io::Read>(reader: R) -> Result<Self, csv::Error> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut entries: HashMap<String, Result<CaptureRecord, MetaError>> = HashMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let Some(name) = record.get(0).filter(|s| !s.is_empty()).map(str::to_string) else {
                log::warn!("manifest line {}: missing filename", i + 2);
                continue;
            };
            let parsed = parse_manifest_record(&record);
            if let Err(e) = &parsed {
                log::warn!("manifest line {}: {e}", i + 2);
            }
            if entries.contains_key(&name) {
                entries.insert(name.clone(), Err(MetaError::DuplicateEntry(name)));
            } else {
                entries.insert(name, parsed);
            }
        }
        Ok(ManifestProvider { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl MetadataProvider for ManifestProvider {
    fn capture_meta(&self, source: &Path) -> Result<CaptureRecord, MetaError> {
        let name = source
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match self.entries.get(&name) {
            Some(entry) => entry.clone(),
            None => Err(MetaError::NotInManifest(name)),
        }
    }
}

/// Archive path for an image: `{archive}/{burrow}/{V}/{YYYYMMDD}/{name}`.
pub fn archive_path(archive: &Path, meta: &CaptureMeta) -> PathBuf {
    archive
        .join(meta.recording_id().archive_dir())
        .join(canonical_name(meta))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileError {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub copied: usize,
    pub skipped_duplicates: usize,
    pub errors: Vec<FileError>,
    /// Images ingested with capture times outside the daylight schedule.
    pub out_of_schedule: usize,
    pub elapsed: Duration,
    /// Recordings that received or already held an image from this card.
    pub recordings: BTreeSet<RecordingId>,
}

impl IngestReport {
    pub fn examined(&self) -> usize {
        self.copied + self.skipped_duplicates + self.errors.len()
    }

    /// Images per second over copied and skipped files; 0 when nothing was timed.
    pub fn rate(&self) -> f64 {
        let secs = self.elapsed.as_secs_f64();
        if secs > 0.0 {
            (self.copied + self.skipped_duplicates) as f64 / secs
        } else {
            0.0
        }
    }

    pub fn merge(&mut self, other: IngestReport) {
        self.copied += other.copied;
        self.skipped_duplicates += other.skipped_duplicates;
        self.errors.extend(other.errors);
        self.out_of_schedule += other.out_of_schedule;
        self.elapsed += other.elapsed;
        self.recordings.extend(other.recordings);
    }
}

enum FileOutcome {
    Copied(CaptureRecord),
    Skipped(CaptureRecord),
    Failed(FileError),
}

/// JPEG files under `source`, sorted by path.
pub fn card_images(source: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let meta = fs::metadata(source).map_err(|e| IngestError::Source {
        path: source.to_path_buf(),
        source: e,
    })?;
    if !meta.is_dir() {
        return Err(IngestError::Source {
            path: source.to_path_buf(),
            source: io::Error::new(io::ErrorKind::InvalidInput, "not a directory"),
        });
    }
    let mut images: Vec<PathBuf> = WalkDir::new(source)
        .into_iter()
        .filter_map(|e| match e {
            Ok(e) => Some(e),
            Err(err) => {
                log::warn!("skipping unreadable entry: {err}");
                None
            }
        })
        .filter(|e| e.file_type().is_file() && is_jpeg_name(e.path()))
        .map(|e| e.into_path())
        .collect();
    images.sort();
    Ok(images)
}

fn is_jpeg_name(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("jpg") || e.eq_ignore_ascii_case("jpeg"))
}

/// Structural completeness check: SOI at the start and EOI at the end
/// (ignoring zero padding). Catches cards pulled mid-write.
pub fn looks_complete_jpeg(bytes: &[u8]) -> bool {
    if bytes.len() < 4 || bytes[..2] != [0xFF, 0xD8] {
        return false;
    }
    let end = bytes.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
    end >= 4 && bytes[end - 2..end] == [0xFF, 0xD9]
}

/// Copies every JPEG on one card into the archive.
///
/// Per-file problems (missing metadata, truncated image, name collision with
/// different content) are collected in the report and never stop the card.
/// Only an unreadable source directory or an uncreatable archive root fails
/// the whole call.
pub fn ingest_card(
    source: &Path,
    archive: &Path,
    provider: &dyn MetadataProvider,
) -> Result<IngestReport, IngestError> {
    let started = Instant::now();
    fs::create_dir_all(archive).map_err(|e| IngestError::Archive {
        path: archive.to_path_buf(),
        source: e,
    })?;
    let images = card_images(source)?;
    let outcomes: Vec<FileOutcome> = images
        .par_iter()
        .map(|path| ingest_file(path, archive, provider))
        .collect();

    let mut report = IngestReport::default();
    for outcome in outcomes {
        match outcome {
            FileOutcome::Copied(rec) => {
                report.copied += 1;
                report.out_of_schedule += rec.out_of_schedule as usize;
                report.recordings.insert(rec.meta.recording_id());
            }
            FileOutcome::Skipped(rec) => {
                report.skipped_duplicates += 1;
                report.out_of_schedule += rec.out_of_schedule as usize;
                report.recordings.insert(rec.meta.recording_id());
            }
            FileOutcome::Failed(err) => report.errors.push(err),
        }
    }
    report.elapsed = started.elapsed();
    log::info!(
        "ingested {}: copied={} skipped={} errors={} ({:.1} images/s)",
        source.display(),
        report.copied,
        report.skipped_duplicates,
        report.errors.len(),
        report.rate()
    );
    Ok(report)
}

fn ingest_file(path: &Path, archive: &Path, provider: &dyn MetadataProvider) -> FileOutcome {
    let fail = |reason: String| {
        FileOutcome::Failed(FileError {
            path: path.to_path_buf(),
            reason,
        })
    };
    let record = match provider.capture_meta(path) {
        Ok(r) => r,
        Err(e) => return fail(format!("metadata: {e}")),
    };
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) => return fail(format!("read: {e}")),
    };
    if !looks_complete_jpeg(&bytes) {
        return fail("truncated or not a JPEG".to_string());
    }
    let dest = archive_path(archive, &record.meta);
    match place_file(&dest, &bytes) {
        Ok(Placement::Written) => FileOutcome::Copied(record),
        Ok(Placement::Identical) => FileOutcome::Skipped(record),
        Ok(Placement::Conflict) => fail(format!(
            "{} already archived with different content",
            dest.display()
        )),
        Err(e) => fail(format!("write {}: {e}", dest.display())),
    }
}

enum Placement {
    Written,
    Identical,
    Conflict,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to `dest` without ever replacing an existing file. The data
/// goes to a temp file in the same directory which is then hard-linked into
/// place, so readers never observe a partial image.
fn place_file(dest: &Path, bytes: &[u8]) -> io::Result<Placement> {
    if let Some(existing) = read_if_exists(dest)? {
        return Ok(if existing == bytes { Placement::Identical } else { Placement::Conflict });
    }
    let dir = dest.parent().expect("archive paths have a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        dest.file_name().unwrap_or_default().to_string_lossy(),
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes)?;
    let linked = fs::hard_link(&tmp, dest);
    let _ = fs::remove_file(&tmp);
    match linked {
        Ok(()) => Ok(Placement::Written),
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
            // Lost a race with another writer; judge its file like any other.
            let existing = fs::read(dest)?;
            Ok(if existing == bytes { Placement::Identical } else { Placement::Conflict })
        }
        Err(e) => Err(e),
    }
}

fn read_if_exists(path: &Path) -> io::Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_manifest_line() {
        let rec = parse_capture_meta("IMG_0001.JPG,B07,O,2021-03-14 09:15:05").unwrap();
        assert_eq!(rec.file_name, "IMG_0001.JPG");
        assert_eq!(rec.meta.burrow_id.as_str(), "B07");
        assert_eq!(rec.meta.view, View::Overhead);
        assert_eq!(rec.meta.timestamp.to_string(), "2021-03-14 09:15:05");
        assert!(!rec.out_of_schedule);
    }

    #[test]
    fn flags_out_of_schedule() {
        let rec = parse_capture_meta("IMG_0002.JPG,B07,O,2021-03-14 22:00:00").unwrap();
        assert!(rec.out_of_schedule);
    }

    #[test]
    fn missing_view_is_an_error() {
        let err = parse_capture_meta("IMG_0003.JPG,B07,,2021-03-14 09:15:10").unwrap_err();
        assert_eq!(err, MetaError::MissingView);
        assert_eq!(err.to_string(), "missing view");
    }

    #[test]
    fn other_malformed_lines() {
        assert_eq!(parse_capture_meta("IMG.JPG,,O,2021-03-14 09:15:10").unwrap_err(), MetaError::MissingBurrow);
        assert!(matches!(
            parse_capture_meta("IMG.JPG,B07,O,14/03/2021").unwrap_err(),
            MetaError::BadTimestamp(_)
        ));
        assert!(matches!(
            parse_capture_meta("IMG.JPG,B07,X,2021-03-14 09:15:10").unwrap_err(),
            MetaError::Name(NameError::InvalidView(_))
        ));
        assert!(matches!(
            parse_capture_meta("IMG.JPG,B-07,O,2021-03-14 09:15:10").unwrap_err(),
            MetaError::Name(NameError::InvalidBurrow(_))
        ));
    }

    #[test]
    fn manifest_provider_isolates_bad_rows() {
        let text = "filename,burrow,view,timestamp\n\
                    a.jpg,B07,O,2021-03-14 09:15:05\n\
                    b.jpg,B07,,2021-03-14 09:15:10\n\
                    c.jpg,B07,F,2021-03-14 09:15:10\n\
                    c.jpg,B07,F,2021-03-14 09:15:15\n";
        let p = ManifestProvider::from_reader(text.as_bytes()).unwrap();
        assert!(p.capture_meta(Path::new("/card/a.jpg")).is_ok());
        assert_eq!(p.capture_meta(Path::new("b.jpg")).unwrap_err(), MetaError::MissingView);
        assert!(matches!(p.capture_meta(Path::new("c.jpg")), Err(MetaError::DuplicateEntry(_))));
        assert!(matches!(p.capture_meta(Path::new("zzz.jpg")), Err(MetaError::NotInManifest(_))));
    }

    #[test]
    fn jpeg_completeness() {
        assert!(looks_complete_jpeg(&[0xFF, 0xD8, 1, 2, 0xFF, 0xD9]));
        assert!(looks_complete_jpeg(&[0xFF, 0xD8, 1, 2, 0xFF, 0xD9, 0, 0]));
        assert!(!looks_complete_jpeg(&[0xFF, 0xD8, 1, 2, 3]));
        assert!(!looks_complete_jpeg(&[0x89, b'P', b'N', b'G', 0xFF, 0xD9]));
        assert!(!looks_complete_jpeg(&[]));
    }
}
