//! Draft segmentation: run a detection provider over a recording and group
//! detection-positive frames into segments.
//!
//! Detector inference is external. Three providers ship here: a reader for
//! precomputed detection CSVs, a line-protocol bridge to a subprocess that
//! serves any model, and a deterministic synthetic stub.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_THRESHOLD: f64 = 0.90;
/// Negative frames tolerated inside one segment (10 s at a 5 s cadence).
pub const DEFAULT_GAP: usize = 2;
pub const DEFAULT_MIN_LEN: usize = 1;

pub const DETECTIONS_HEADER: [&str; 7] = ["frame_index", "x", "y", "w", "h", "confidence", "label"];
pub const SEGMENTS_HEADER: [&str; 5] = ["recording_id", "start_frame", "end_frame", "source", "animal_ids"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_index: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub label: String,
}

impl Detection {
    /// Checks the value ranges; `image_size` additionally bounds the box.
    pub fn validate(&self, image_size: Option<(u32, u32)>) -> Result<(), String> {
        let b = &self.bbox;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0,1]", self.confidence));
        }
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(format!("non-positive box size {}x{}", b.w, b.h));
        }
        if !(b.x >= 0.0 && b.y >= 0.0) {
            return Err(format!("negative box origin ({}, {})", b.x, b.y));
        }
        if let Some((w, h)) = image_size {
            if b.x + b.w > w as f64 || b.y + b.h > h as f64 {
                return Err(format!("box exceeds {w}x{h} image"));
            }
        }
        Ok(())
    }
}

/// Result of scanning one frame.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameScan {
    Scanned(Vec<Detection>),
    /// The provider failed on this frame; treated as negative when grouping.
    Unscanned(String),
}

impl FrameScan {
    pub fn detections(&self) -> &[Detection] {
        match self {
            FrameScan::Scanned(d) => d,
            FrameScan::Unscanned(_) => &[],
        }
    }

    pub fn is_positive(&self, threshold: f64) -> bool {
        self.detections().iter().any(|d| d.confidence >= threshold)
    }
}

#[derive(Debug, Clone, Default)]
pub struct DetectionPass {
    /// One entry per frame, in frame order.
    pub scans: Vec<FrameScan>,
    pub elapsed: Duration,
}

impl DetectionPass {
    pub fn unscanned(&self) -> Vec<usize> {
        self.scans
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, FrameScan::Unscanned(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn frames_per_second(&self) -> f64 {
        let secs = self.elapsed.as_secs_f64();
        if secs > 0.0 {
            self.scans.len() as f64 / secs
        } else {
            f64::INFINITY
        }
    }

    /// All detections, flattened in frame order.
    pub fn detections(&self) -> Vec<Detection> {
        self.scans.iter().flat_map(|s| s.detections().iter().cloned()).collect()
    }
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("detection provider unavailable: {0}")]
    Unavailable(String),
    #[error("{0}")]
    Frame(String),
}

/// One frame handed to a detection provider.
#[derive(Debug, Clone, Copy)]
pub struct FrameRef<'a> {
    pub index: usize,
    pub path: &'a Path,
}

pub trait DetectionProvider: Sync {
    /// Called once before a pass; an error aborts the pass.
    fn check_ready(&self) -> Result<(), ProviderError> {
        Ok(())
    }

    fn detect(&self, frame: FrameRef<'_>) -> Result<Vec<Detection>, ProviderError>;
}

/// Scans every frame; a per-frame failure marks that frame unscanned and the
/// pass continues. Results come back in frame order regardless of how the
/// provider calls were scheduled.
pub fn run_detection_pass(
    frames: &[PathBuf],
    provider: &dyn DetectionProvider,
) -> Result<DetectionPass, ProviderError> {
    provider.check_ready()?;
    let started = Instant::now();
    let scans = frames
        .par_iter()
        .enumerate()
        .map(|(index, path)| match provider.detect(FrameRef { index, path }) {
            Ok(mut dets) => {
                for d in &mut dets {
                    d.frame_index = index;
                }
                FrameScan::Scanned(dets)
            }
            Err(e) => {
                log::warn!("frame {index} ({}) unscanned: {e}", path.display());
                FrameScan::Unscanned(e.to_string())
            }
        })
        .collect();
    Ok(DetectionPass {
        scans,
        elapsed: started.elapsed(),
    })
}

/// Precomputed detections keyed by frame index. Frames with no rows have no
/// detections.
#[derive(Debug, Clone, Default)]
pub struct CsvDetections {
    by_frame: BTreeMap<usize, Vec<Detection>>,
}

impl CsvDetections {
    pub fn new(detections: Vec<Detection>) -> Self {
        let mut by_frame: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
        for d in detections {
            by_frame.entry(d.frame_index).or_default().push(d);
        }
        CsvDetections { by_frame }
    }

    pub fn from_path(path: &Path) -> Result<Self, CsvError> {
        let file = std::fs::File::open(path).map_err(|e| CsvError::Io(e.to_string()))?;
        Ok(Self::new(read_detections(file)?))
    }
}

impl DetectionProvider for CsvDetections {
    fn detect(&self, frame: FrameRef<'_>) -> Result<Vec<Detection>, ProviderError> {
        Ok(self.by_frame.get(&frame.index).cloned().unwrap_or_default())
    }
}

/// Deterministic stand-in detector. Each frame independently holds an animal
/// with probability `presence`; confidences are drawn from a seeded RNG.
#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    pub seed: u64,
    pub presence: f64,
    /// Frames on which `detect` reports a failure.
    pub fail_on: BTreeSet<usize>,
}

impl SyntheticDetector {
    pub fn new(seed: u64) -> Self {
        SyntheticDetector {
            seed,
            presence: 0.3,
            fail_on: BTreeSet::new(),
        }
    }
}

impl DetectionProvider for SyntheticDetector {
    fn detect(&self, frame: FrameRef<'_>) -> Result<Vec<Detection>, ProviderError> {
        if self.fail_on.contains(&frame.index) {
            return Err(ProviderError::Frame(format!("synthetic failure on frame {}", frame.index)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (frame.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if !rng.gen_bool(self.presence.clamp(0.0, 1.0)) {
            return Ok(Vec::new());
        }
        Ok(vec![Detection {
            frame_index: frame.index,
            bbox: BBox {
                x: rng.gen_range(0.0..1500.0),
                y: rng.gen_range(0.0..1000.0),
                w: rng.gen_range(100.0..500.0),
                h: rng.gen_range(100.0..500.0),
            },
            confidence: rng.gen_range(0.5..1.0),
            label: "tortoise".to_string(),
        }])
    }
}

/// Box, confidence and label as sent by the subprocess.
type RawDetection = (BBox, f64, String);

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Bridge to an external detector speaking the line protocol:
///
/// ```text
/// > DETECT /path/to/frame.jpg
/// < OK 2
/// < 10 20 300 200 0.97 tortoise
/// < 800 40 120 90 0.41 tortoise
/// ```
///
/// or `ERR <message>` for a per-frame failure.
pub struct SubprocessDetector {
    pipe: Mutex<Option<Pipe>>,
    spawn_error: Option<String>,
}

impl SubprocessDetector {
    pub fn spawn(program: &str, args: &[String]) -> Self {
        let child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn();
        match child {
            Ok(mut child) => {
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
                SubprocessDetector {
                    pipe: Mutex::new(Some(Pipe { child, stdin, stdout })),
                    spawn_error: None,
                }
            }
            Err(e) => SubprocessDetector {
                pipe: Mutex::new(None),
                spawn_error: Some(format!("{program}: {e}")),
            },
        }
    }

    fn request(pipe: &mut Pipe, path: &Path) -> io::Result<Result<Vec<RawDetection>, String>> {
        writeln!(pipe.stdin, "DETECT {}", path.display())?;
        pipe.stdin.flush()?;
        let header = read_line(&mut pipe.stdout)?;
        if let Some(msg) = header.strip_prefix("ERR") {
            return Ok(Err(msg.trim().to_string()));
        }
        let count: usize = header
            .strip_prefix("OK ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("bad reply {header:?}")))?;
        let mut dets = Vec::with_capacity(count);
        for _ in 0..count {
            let line = read_line(&mut pipe.stdout)?;
            dets.push(parse_detection_line(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
        }
        Ok(Ok(dets))
    }
}

fn read_line(r: &mut impl BufRead) -> io::Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "provider closed its output"));
    }
    Ok(line.trim_end().to_string())
}

fn parse_detection_line(line: &str) -> Result<(BBox, f64, String), String> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 6 {
        return Err(format!("expected `x y w h confidence label`, got {line:?}"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?} in {line:?}"));
    Ok((
        BBox {
            x: num(parts[0])?,
            y: num(parts[1])?,
            w: num(parts[2])?,
            h: num(parts[3])?,
        },
        num(parts[4])?,
        parts[5].to_string(),
    ))
}

impl DetectionProvider for SubprocessDetector {
    fn check_ready(&self) -> Result<(), ProviderError> {
        if let Some(e) = &self.spawn_error {
            return Err(ProviderError::Unavailable(e.clone()));
        }
        let mut guard = self.pipe.lock().expect("provider lock");
        match guard.as_mut().map(|p| p.child.try_wait()) {
            Some(Ok(None)) => Ok(()),
            Some(Ok(Some(status))) => Err(ProviderError::Unavailable(format!("provider exited with {status}"))),
            Some(Err(e)) => Err(ProviderError::Unavailable(e.to_string())),
            None => Err(ProviderError::Unavailable("provider not running".into())),
        }
    }

    fn detect(&self, frame: FrameRef<'_>) -> Result<Vec<Detection>, ProviderError> {
        let mut guard = self.pipe.lock().expect("provider lock");
        let pipe = guard
            .as_mut()
            .ok_or_else(|| ProviderError::Unavailable("provider not running".into()))?;
        match Self::request(pipe, frame.path) {
            Ok(Ok(dets)) => Ok(dets
                .into_iter()
                .map(|(bbox, confidence, label)| Detection {
                    frame_index: frame.index,
                    bbox,
                    confidence,
                    label,
                })
                .collect()),
            Ok(Err(msg)) => Err(ProviderError::Frame(msg)),
            Err(e) => {
                // Stream is out of sync or dead; later frames fail fast.
                if let Some(mut p) = guard.take() {
                    let _ = p.child.kill();
                    let _ = p.child.wait();
                }
                Err(ProviderError::Frame(format!("protocol failure: {e}")))
            }
        }
    }
}

impl Drop for SubprocessDetector {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.pipe.lock() {
            if let Some(mut p) = guard.take() {
                drop(p.stdin);
                let _ = p.child.wait();
            }
        }
    }
}

/// Where a segment came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    Auto,
    Human,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Auto => "Auto",
            Source::Human => "Human",
        })
    }
}

impl FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Auto" | "auto" => Ok(Source::Auto),
            "Human" | "human" => Ok(Source::Human),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

/// Inclusive frame interval of one recording.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub recording_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub source: Source,
    pub animal_ids: BTreeSet<String>,
}

impl Segment {
    pub fn new(recording_id: impl Into<String>, start_frame: usize, end_frame: usize, source: Source) -> Self {
        Segment {
            recording_id: recording_id.into(),
            start_frame,
            end_frame,
            source,
            animal_ids: BTreeSet::new(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }

    pub fn overlaps(&self, other: &Segment) -> bool {
        self.start_frame <= other.end_frame && other.start_frame <= self.end_frame
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub threshold: f64,
    /// Largest run of negative frames allowed inside one segment.
    pub gap: usize,
    /// Minimum number of positive frames for a segment to be kept.
    pub min_len: usize,
}

impl Default for GroupParams {
    fn default() -> Self {
        GroupParams {
            threshold: DEFAULT_THRESHOLD,
            gap: DEFAULT_GAP,
            min_len: DEFAULT_MIN_LEN,
        }
    }
}

/// Inclusive `(first, last)` positive-frame spans. Positives separated by at
/// most `gap` negatives share a span; spans with fewer than `min_len`
/// positives are dropped.
pub fn group_positive_frames(positive: &[bool], gap: usize, min_len: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    // (first, last, positive count)
    let mut open: Option<(usize, usize, usize)> = None;
    for (i, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
        open = match open {
            Some((first, last, n)) if i - last - 1 <= gap => Some((first, i, n + 1)),
            Some((first, last, n)) => {
                if n >= min_len {
                    spans.push((first, last));
                }
                Some((i, i, 1))
            }
            None => Some((i, i, 1)),
        };
    }
    if let Some((first, last, n)) = open {
        if n >= min_len {
            spans.push((first, last));
        }
    }
    spans
}

pub fn group_detections(scans: &[FrameScan], recording_id: &str, params: &GroupParams) -> Vec<Segment> {
    let positive: Vec<bool> = scans.iter().map(|s| s.is_positive(params.threshold)).collect();
    group_positive_frames(&positive, params.gap, params.min_len.max(1))
        .into_iter()
        .map(|(start, end)| Segment::new(recording_id, start, end, Source::Auto))
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CsvError {
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("{what} {value:?} is not a valid value at line {line}")]
    BadValue { line: u64, what: &'static str, value: String },
    #[error("start > end at line {line}")]
    StartAfterEnd { line: u64 },
    #[error("{message} at line {line}")]
    Invalid { line: u64, message: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<csv::Error> for CsvError {
    fn from(e: csv::Error) -> Self {
        CsvError::Csv(e.to_string())
    }
}

fn column_indices(headers: &csv::StringRecord, names: &[&str]) -> Result<Vec<usize>, CsvError> {
    names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| CsvError::MissingColumn(name.to_string()))
        })
        .collect()
}

fn parse_field<T: FromStr>(record: &csv::StringRecord, idx: usize, what: &'static str, line: u64) -> Result<T, CsvError> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| CsvError::BadValue {
        line,
        what,
        value: raw.to_string(),
    })
}

/// Reads a segment CSV. Rows come back sorted by recording, start and end.
pub fn read_segments<R: io::Read>(reader: R) -> Result<Vec<Segment>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let cols = column_indices(rdr.headers()?, &SEGMENTS_HEADER)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let recording_id = record.get(cols[0]).unwrap_or("").trim().to_string();
        if recording_id.is_empty() {
            return Err(CsvError::Invalid {
                line,
                message: "empty recording_id".into(),
            });
        }
        let start: usize = parse_field(&record, cols[1], "start_frame", line)?;
        let end: usize = parse_field(&record, cols[2], "end_frame", line)?;
        if start > end {
            return Err(CsvError::StartAfterEnd { line });
        }
        let source: Source = parse_field(&record, cols[3], "source", line)?;
        let animal_ids = record
            .get(cols[4])
            .unwrap_or("")
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        out.push(Segment {
            recording_id,
            start_frame: start,
            end_frame: end,
            source,
            animal_ids,
        });
    }
    out.sort();
    Ok(out)
}

pub fn write_segments<W: io::Write>(writer: W, segments: &[Segment]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SEGMENTS_HEADER)?;
    for s in segments {
        let ids = s.animal_ids.iter().cloned().collect::<Vec<_>>().join(";");
        w.write_record([
            s.recording_id.as_str(),
            &s.start_frame.to_string(),
            &s.end_frame.to_string(),
            &s.source.to_string(),
            &ids,
        ])?;
    }
    w.flush().map_err(|e| CsvError::Io(e.to_string()))
}

pub fn read_detections<R: io::Read>(reader: R) -> Result<Vec<Detection>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let cols = column_indices(rdr.headers()?, &DETECTIONS_HEADER)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let det = Detection {
            frame_index: parse_field(&record, cols[0], "frame_index", line)?,
            bbox: BBox {
                x: parse_field(&record, cols[1], "x", line)?,
                y: parse_field(&record, cols[2], "y", line)?,
                w: parse_field(&record, cols[3], "w", line)?,
                h: parse_field(&record, cols[4], "h", line)?,
            },
            confidence: parse_field(&record, cols[5], "confidence", line)?,
            label: record.get(cols[6]).unwrap_or("").trim().to_string(),
        };
        det.validate(None).map_err(|message| CsvError::Invalid { line, message })?;
        out.push(det);
    }
    out.sort_by_key(|d| d.frame_index);
    Ok(out)
}

pub fn write_detections<W: io::Write>(writer: W, detections: &[Detection]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DETECTIONS_HEADER)?;
    for d in detections {
        w.write_record([
            d.frame_index.to_string(),
            d.bbox.x.to_string(),
            d.bbox.y.to_string(),
            d.bbox.w.to_string(),
            d.bbox.h.to_string(),
            d.confidence.to_string(),
            d.label.clone(),
        ])?;
    }
    w.flush().map_err(|e| CsvError::Io(e.to_string()))
}
