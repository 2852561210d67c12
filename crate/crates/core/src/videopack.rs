//! Camera-day video packaging via an external encoder (ffmpeg).
//!
//! A recording's frame index is its position in the timestamp-sorted
//! [`EncodePlan`]; every downstream module (segments, suggestions, frame
//! extraction) uses that index.

use std::fs;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStderr, Command, Stdio};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use regex::Regex;
use thiserror::Error;

use crate::naming::{parse_canonical_name, BurrowId, RecordingId};

pub const DEFAULT_FPS: u32 = 30;
/// Half the 5 s capture cadence.
pub const DEFAULT_ALIGN_TOLERANCE_SECS: f64 = 2.5;
pub const ENCODER_ENV: &str = "TRAPLINE_FFMPEG";

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("cannot list {path}: {source}")]
    Listing { path: PathBuf, source: io::Error },
    #[error("encoder {binary} unavailable: {source}")]
    EncoderUnavailable { binary: PathBuf, source: io::Error },
    #[error("encoder failed ({status}): {diagnostics}")]
    EncoderFailed { status: String, diagnostics: String },
    #[error("encoder produced {actual} frames, expected {expected}")]
    FrameCountMismatch { expected: usize, actual: usize },
    #[error("cannot parse encoder probe output for {path}")]
    Probe { path: PathBuf },
    #[error("alignment row {row} references {column} frame {index} but the video has {frames} frames")]
    IndexOutOfBounds {
        row: usize,
        column: &'static str,
        index: usize,
        frames: usize,
    },
    #[error("video has no frame {index}")]
    NoSuchFrame { index: usize },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> VideoError + '_ {
    move |source| VideoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanFrame {
    pub path: PathBuf,
    pub timestamp: NaiveDateTime,
}

/// Ordered frames of one camera-day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodePlan {
    pub recording_id: RecordingId,
    /// Strictly increasing in timestamp. Position is the frame index.
    pub frames: Vec<PlanFrame>,
    pub fps: u32,
}

impl EncodePlan {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.frames.iter().map(|f| f.path.clone()).collect()
    }
}

/// Lists a camera-day directory of the archive into an encode plan.
///
/// Files whose names are not canonical or belong to another recording are
/// skipped with a warning; they are returned so callers can report them. A
/// missing directory yields an empty plan.
pub fn plan_day(
    archive: &Path,
    recording_id: &RecordingId,
    fps: u32,
) -> Result<(EncodePlan, Vec<PathBuf>), VideoError> {
    let dir = archive.join(recording_id.archive_dir());
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    let entries = match fs::read_dir(&dir) {
        Ok(e) => Some(e),
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(source) => return Err(VideoError::Listing { path: dir, source }),
    };
    for entry in entries.into_iter().flatten() {
        let entry = entry.map_err(|source| VideoError::Listing {
            path: dir.clone(),
            source,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        // Leftover temp files from an interrupted ingest.
        if name.starts_with('.') {
            continue;
        }
        match parse_canonical_name(&name) {
            Ok(meta) if meta.recording_id() == *recording_id => frames.push(PlanFrame {
                path: entry.path(),
                timestamp: meta.timestamp,
            }),
            Ok(_) => {
                log::warn!("{} does not belong to {recording_id}; skipped", entry.path().display());
                skipped.push(entry.path());
            }
            Err(e) => {
                log::warn!("{}: {e}; skipped", entry.path().display());
                skipped.push(entry.path());
            }
        }
    }
    frames.sort_by_key(|f| f.timestamp);
    frames.dedup_by_key(|f| f.timestamp);
    Ok((
        EncodePlan {
            recording_id: recording_id.clone(),
            frames,
            fps,
        },
        skipped,
    ))
}

/// One output row of a side-by-side composite. `None` is a filler cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignedRow {
    pub overhead: Option<usize>,
    pub front: Option<usize>,
}

/// Output frame `i` of the composite shows `rows[i]`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentMap {
    pub rows: Vec<AlignedRow>,
}

impl AlignmentMap {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Swaps the overhead and front columns.
    pub fn transposed(&self) -> AlignmentMap {
        AlignmentMap {
            rows: self
                .rows
                .iter()
                .map(|r| AlignedRow {
                    overhead: r.front,
                    front: r.overhead,
                })
                .collect(),
        }
    }

    /// Both columns strictly increasing over their non-filler entries.
    pub fn is_monotone(&self) -> bool {
        fn increasing(it: impl Iterator<Item = usize>) -> bool {
            let v: Vec<usize> = it.collect();
            v.windows(2).all(|w| w[0] < w[1])
        }
        increasing(self.rows.iter().filter_map(|r| r.overhead))
            && increasing(self.rows.iter().filter_map(|r| r.front))
    }
}

/// Greedy two-pointer merge of two sorted timestamp streams. Frames within
/// `tolerance_secs` of each other pair up; otherwise the earlier frame is
/// emitted alone against a filler.
pub fn align_timestamps(
    overhead: &[NaiveDateTime],
    front: &[NaiveDateTime],
    tolerance_secs: f64,
) -> AlignmentMap {
    let tolerance_ms = (tolerance_secs.max(0.0) * 1000.0).round() as i64;
    let (mut i, mut j) = (0, 0);
    let mut rows = Vec::with_capacity(overhead.len().max(front.len()));
    while i < overhead.len() || j < front.len() {
        let row = match (overhead.get(i), front.get(j)) {
            (Some(o), Some(f)) => {
                let dt = (*f - *o).num_milliseconds();
                if dt.abs() <= tolerance_ms {
                    i += 1;
                    j += 1;
                    AlignedRow { overhead: Some(i - 1), front: Some(j - 1) }
                } else if dt > 0 {
                    i += 1;
                    AlignedRow { overhead: Some(i - 1), front: None }
                } else {
                    j += 1;
                    AlignedRow { overhead: None, front: Some(j - 1) }
                }
            }
            (Some(_), None) => {
                i += 1;
                AlignedRow { overhead: Some(i - 1), front: None }
            }
            (None, Some(_)) => {
                j += 1;
                AlignedRow { overhead: None, front: Some(j - 1) }
            }
            (None, None) => unreachable!(),
        };
        rows.push(row);
    }
    AlignmentMap { rows }
}

pub fn align_streams(overhead: &EncodePlan, front: &EncodePlan, tolerance_secs: f64) -> AlignmentMap {
    align_timestamps(&overhead.timestamps(), &front.timestamps(), tolerance_secs)
}

/// How composite cells without a source frame are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillPolicy {
    /// Repeat the last real frame shown from that camera; black before the first.
    #[default]
    RepeatLast,
    Black,
}

/// External encoder invocation settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub binary: PathBuf,
    /// Passed through before the output path.
    pub output_args: Vec<String>,
}

impl Default for Encoder {
    fn default() -> Self {
        Encoder {
            binary: PathBuf::from("ffmpeg"),
            output_args: ["-c:v", "libx264", "-preset", "veryfast", "-crf", "23", "-pix_fmt", "yuv420p"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl Encoder {
    /// Default settings with the binary taken from `TRAPLINE_FFMPEG` when set.
    pub fn from_env() -> Self {
        let mut enc = Encoder::default();
        if let Some(path) = std::env::var_os(ENCODER_ENV).filter(|p| !p.is_empty()) {
            enc.binary = PathBuf::from(path);
        }
        enc
    }

    pub fn check_available(&self) -> Result<(), VideoError> {
        let status = Command::new(&self.binary)
            .arg("-version")
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map_err(|source| VideoError::EncoderUnavailable {
                binary: self.binary.clone(),
                source,
            })?;
        if status.success() {
            Ok(())
        } else {
            Err(VideoError::EncoderUnavailable {
                binary: self.binary.clone(),
                source: io::Error::other(format!("-version exited with {status}")),
            })
        }
    }

    fn command(&self) -> Command {
        let mut cmd = Command::new(&self.binary);
        cmd.args(["-hide_banner", "-loglevel", "error"]);
        cmd
    }

    fn spawn(&self, cmd: &mut Command) -> Result<Child, VideoError> {
        cmd.spawn().map_err(|source| VideoError::EncoderUnavailable {
            binary: self.binary.clone(),
            source,
        })
    }
}

/// Descriptor of an encoded video as reported by probing the file.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAsset {
    pub path: PathBuf,
    pub frames: usize,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
}

impl VideoAsset {
    pub fn duration(&self) -> Duration {
        if self.fps > 0.0 {
            Duration::from_secs_f64(self.frames as f64 / self.fps)
        } else {
            Duration::ZERO
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncodeOutcome {
    Encoded(VideoAsset),
    /// Nothing was captured that day; no file is written.
    EmptyDay,
}

pub fn video_file_name(recording_id: &RecordingId) -> String {
    format!("{recording_id}.mp4")
}

pub fn composite_file_name(burrow: &BurrowId, date_code: &str) -> String {
    format!("{burrow}-{date_code}-composite.mp4")
}

fn temp_output(out: &Path) -> PathBuf {
    let name = out.file_name().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!(".{name}.{}.partial.mp4", std::process::id()))
}

fn even_pad_filter() -> &'static str {
    // H.264 with 4:2:0 chroma needs even dimensions.
    "pad=ceil(iw/2)*2:ceil(ih/2)*2"
}

fn drain(stderr: Option<ChildStderr>) -> JoinHandle<String> {
    std::thread::spawn(move || {
        let mut text = String::new();
        if let Some(mut s) = stderr {
            let _ = s.read_to_string(&mut text);
        }
        text
    })
}

/// Encodes a plan into an MP4 at `out` by piping the JPEG files to the encoder.
pub fn encode_day(plan: &EncodePlan, out: &Path, encoder: &Encoder) -> Result<EncodeOutcome, VideoError> {
    if plan.is_empty() {
        return Ok(EncodeOutcome::EmptyDay);
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = temp_output(out);
    let fps = plan.fps.to_string();
    let mut cmd = encoder.command();
    cmd.args(["-y", "-f", "image2pipe", "-framerate", &fps, "-c:v", "mjpeg", "-i", "-"])
        .args(["-vf", even_pad_filter()])
        .args(&encoder.output_args)
        .args(["-r", &fps, "-f", "mp4"])
        .arg(&tmp)
        .stdin(Stdio::piped())
        .stdout(Stdio::null())
        .stderr(Stdio::piped());
    let mut child = encoder.spawn(&mut cmd)?;
    let stderr = drain(child.stderr.take());
    let mut stdin = child.stdin.take().expect("piped stdin");

    let mut feed_error = None;
    for frame in &plan.frames {
        let result = fs::read(&frame.path)
            .map_err(io_err(&frame.path))
            .and_then(|bytes| stdin.write_all(&bytes).map_err(io_err(&tmp)));
        if let Err(e) = result {
            feed_error = Some(e);
            break;
        }
    }
    drop(stdin);
    let status = child.wait().map_err(io_err(&tmp))?;
    let diagnostics = stderr.join().unwrap_or_default();
    if !status.success() {
        let _ = fs::remove_file(&tmp);
        return Err(VideoError::EncoderFailed {
            status: status.to_string(),
            diagnostics,
        });
    }
    if let Some(e) = feed_error {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, out).map_err(io_err(out))?;
    let asset = probe(out, encoder)?;
    if asset.frames != plan.len() {
        return Err(VideoError::FrameCountMismatch {
            expected: plan.len(),
            actual: asset.frames,
        });
    }
    Ok(EncodeOutcome::Encoded(asset))
}

/// Reads frame count, frame rate and dimensions of a video by decoding it.
pub fn probe(path: &Path, encoder: &Encoder) -> Result<VideoAsset, VideoError> {
    let output = Command::new(&encoder.binary)
        .args(["-hide_banner", "-nostdin", "-i"])
        .arg(path)
        .args(["-map", "0:v:0", "-f", "null", "-progress", "pipe:1", "-"])
        .stdin(Stdio::null())
        .output()
        .map_err(|source| VideoError::EncoderUnavailable {
            binary: encoder.binary.clone(),
            source,
        })?;
    let stdout = String::from_utf8_lossy(&output.stdout);
    let stderr = String::from_utf8_lossy(&output.stderr);
    if !output.status.success() {
        return Err(VideoError::EncoderFailed {
            status: output.status.to_string(),
            diagnostics: stderr.into_owned(),
        });
    }
    parse_probe(path, &stdout, &stderr)
}

fn parse_probe(path: &Path, progress: &str, info: &str) -> Result<VideoAsset, VideoError> {
    let fail = || VideoError::Probe { path: path.to_path_buf() };
    let frames = progress
        .lines()
        .rev()
        .filter_map(|l| l.strip_prefix("frame="))
        .find_map(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(fail)?;
    let stream = info.lines().find(|l| l.contains("Video:")).ok_or_else(fail)?;
    let dims = Regex::new(r"[ ,](\d{1,5})x(\d{1,5})[ ,\[]").expect("static regex");
    let caps = dims.captures(stream).ok_or_else(fail)?;
    let width = caps[1].parse().map_err(|_| fail())?;
    let height = caps[2].parse().map_err(|_| fail())?;
    let rate = Regex::new(r"([\d.]+)(k?) fps").expect("static regex");
    let fps = rate
        .captures(stream)
        .and_then(|c| {
            let v: f64 = c[1].parse().ok()?;
            Some(if &c[2] == "k" { v * 1000.0 } else { v })
        })
        .ok_or_else(fail)?;
    Ok(VideoAsset {
        path: path.to_path_buf(),
        frames,
        fps,
        width,
        height,
    })
}

/// Streams the decoded RGB frames of one video in order.
struct FrameReader {
    child: Child,
    reader: BufReader<std::process::ChildStdout>,
    stderr: Option<JoinHandle<String>>,
    frame_bytes: usize,
    next_index: usize,
    current: Option<Vec<u8>>,
}

impl FrameReader {
    fn open(asset: &VideoAsset, encoder: &Encoder) -> Result<Self, VideoError> {
        let mut cmd = encoder.command();
        cmd.arg("-nostdin")
            .arg("-i")
            .arg(&asset.path)
            .args(["-map", "0:v:0", "-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let mut child = encoder.spawn(&mut cmd)?;
        let stderr = Some(drain(child.stderr.take()));
        let reader = BufReader::with_capacity(1 << 20, child.stdout.take().expect("piped stdout"));
        Ok(FrameReader {
            child,
            reader,
            stderr,
            frame_bytes: asset.width as usize * asset.height as usize * 3,
            next_index: 0,
            current: None,
        })
    }

    /// Advances to frame `index`; indices must be requested in increasing order.
    fn seek(&mut self, index: usize) -> Result<&[u8], VideoError> {
        while self.next_index <= index {
            let mut buf = self.current.take().unwrap_or_else(|| vec![0; self.frame_bytes]);
            if let Err(e) = self.reader.read_exact(&mut buf) {
                let diagnostics = self.finish();
                return Err(VideoError::EncoderFailed {
                    status: format!("decoder ended before frame {index}: {e}"),
                    diagnostics,
                });
            }
            self.current = Some(buf);
            self.next_index += 1;
        }
        Ok(self.current.as_deref().expect("frame decoded"))
    }

    fn finish(&mut self) -> String {
        let _ = self.child.kill();
        let _ = self.child.wait();
        self.stderr.take().and_then(|h| h.join().ok()).unwrap_or_default()
    }
}

impl Drop for FrameReader {
    fn drop(&mut self) {
        self.finish();
    }
}

fn blit(canvas: &mut [u8], canvas_width: usize, src: &[u8], src_width: usize, x_offset: usize) {
    let row_bytes = src_width * 3;
    for (y, row) in src.chunks_exact(row_bytes).enumerate() {
        let start = (y * canvas_width + x_offset) * 3;
        canvas[start..start + row_bytes].copy_from_slice(row);
    }
}

/// Builds the time-aligned side-by-side video: overhead on the left, front on
/// the right, one output frame per alignment row.
pub fn compose_side_by_side(
    overhead: &VideoAsset,
    front: &VideoAsset,
    map: &AlignmentMap,
    out: &Path,
    fps: u32,
    fill: FillPolicy,
    encoder: &Encoder,
) -> Result<EncodeOutcome, VideoError> {
    for (row, r) in map.rows.iter().enumerate() {
        for (column, index, frames) in [
            ("overhead", r.overhead, overhead.frames),
            ("front", r.front, front.frames),
        ] {
            if let Some(index) = index.filter(|&i| i >= frames) {
                return Err(VideoError::IndexOutOfBounds { row, column, index, frames });
            }
        }
    }
    if map.is_empty() {
        return Ok(EncodeOutcome::EmptyDay);
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let width = (overhead.width + front.width) as usize;
    let height = overhead.height.max(front.height) as usize;
    let tmp = temp_output(out);
    let fps_arg = fps.to_string();
    let mut cmd = encoder.command();
    cmd.args(["-y", "-f", "rawvideo", "-pix_fmt", "rgb24"])
        .args(["-s", &format!("{width}x{height}"), "-framerate", &fps_arg, "-i", "-"])
        .args(["-vf", even_pad_filter()])
        .args(&encoder.output_args)
        .args(["-r", &fps_arg, "-f", "mp4"])
        .arg(&tmp)
        .stdin(Stdio::piped())
        .stdout(Stdio::null())
        .stderr(Stdio::piped());

    let mut left = FrameReader::open(overhead, encoder)?;
    let mut right = FrameReader::open(front, encoder)?;
    let mut child = encoder.spawn(&mut cmd)?;
    let stderr = drain(child.stderr.take());
    let mut stdin = child.stdin.take().expect("piped stdin");

    let mut canvas = vec![0u8; width * height * 3];
    let mut shown = [false, false];
    let mut feed = || -> Result<(), VideoError> {
        for row in &map.rows {
            for (slot, (reader, asset, index, x_offset)) in [
                (&mut left, overhead, row.overhead, 0usize),
                (&mut right, front, row.front, overhead.width as usize),
            ]
            .into_iter()
            .enumerate()
            {
                let w = asset.width as usize;
                match (index, fill) {
                    (Some(i), _) => {
                        let frame = reader.seek(i)?;
                        blit(&mut canvas, width, frame, w, x_offset);
                        shown[slot] = true;
                    }
                    // Canvas still holds the last real frame for this column.
                    (None, FillPolicy::RepeatLast) if shown[slot] => {}
                    (None, _) => {
                        let black = vec![0u8; w * asset.height as usize * 3];
                        blit(&mut canvas, width, &black, w, x_offset);
                    }
                }
            }
            stdin.write_all(&canvas).map_err(io_err(&tmp))?;
        }
        Ok(())
    };
    let fed = feed();
    drop(stdin);
    drop(left);
    drop(right);
    let status = child.wait().map_err(io_err(&tmp))?;
    let diagnostics = stderr.join().unwrap_or_default();
    if !status.success() {
        let _ = fs::remove_file(&tmp);
        return Err(VideoError::EncoderFailed {
            status: status.to_string(),
            diagnostics,
        });
    }
    if let Err(e) = fed {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, out).map_err(io_err(out))?;
    let asset = probe(out, encoder)?;
    if asset.frames != map.len() {
        return Err(VideoError::FrameCountMismatch {
            expected: map.len(),
            actual: asset.frames,
        });
    }
    Ok(EncodeOutcome::Encoded(asset))
}

/// Encodes several plans concurrently with at most `workers` jobs in flight.
pub fn encode_batch(
    jobs: &[(EncodePlan, PathBuf)],
    encoder: &Encoder,
    workers: usize,
) -> Vec<Result<EncodeOutcome, VideoError>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        jobs.par_iter()
            .map(|(plan, out)| encode_day(plan, out, encoder))
            .collect()
    })
}

/// Extracts frame `index` of a video as JPEG bytes.
pub fn extract_frame_jpeg(video: &Path, index: usize, encoder: &Encoder) -> Result<Vec<u8>, VideoError> {
    let select = format!("select=eq(n\\,{index})");
    let output = Command::new(&encoder.binary)
        .args(["-hide_banner", "-loglevel", "error", "-nostdin", "-i"])
        .arg(video)
        .args(["-map", "0:v:0", "-vf", &select, "-frames:v", "1"])
        .args(["-f", "image2pipe", "-c:v", "mjpeg", "-q:v", "3", "-"])
        .stdin(Stdio::null())
        .output()
        .map_err(|source| VideoError::EncoderUnavailable {
            binary: encoder.binary.clone(),
            source,
        })?;
    if !output.status.success() {
        return Err(VideoError::EncoderFailed {
            status: output.status.to_string(),
            diagnostics: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    if output.stdout.is_empty() {
        return Err(VideoError::NoSuchFrame { index });
    }
    Ok(output.stdout)
}
