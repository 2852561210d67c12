//! Runs re-identification over every segment of a recording and stores the
//! ranked suggestions the annotation service serves.

use std::collections::BTreeMap;
use std::io;
use std::path::PathBuf;

use image::RgbImage;
use rayon::prelude::*;

use super::geometry::{canonicalize_mugshot, MugshotSource};
use super::library::{Metric, ReferenceLibrary};
use super::providers::{EmbeddingProvider, MaskProvider, MaskRequest};
use super::query::{query_topk, Prediction, Ranked, DEFAULT_TOP_K};
use super::ReidError;
use crate::segmenter::{Detection, Segment};

pub const DEFAULT_FRAMES_PER_SEGMENT: usize = 5;
pub const SUGGESTIONS_HEADER: &str = "recording_id,frame_index,detection,rank,individual_id,distance";

/// Evenly spaced frame indices over the inclusive range `start..=end`,
/// always including both ends when more than one frame is requested.
pub fn sample_segment_frames(start: usize, end: usize, n: usize) -> Vec<usize> {
    if n == 0 || end < start {
        return Vec::new();
    }
    let len = end - start + 1;
    if len <= n {
        return (start..=end).collect();
    }
    if n == 1 {
        return vec![start + (end - start) / 2];
    }
    (0..n).map(|i| start + i * (end - start) / (n - 1)).collect()
}

pub trait FrameSource: Sync {
    fn frame(&self, index: usize) -> Result<RgbImage, ReidError>;
}

/// Frames read straight from the archived JPEGs, in capture order.
#[derive(Debug, Clone)]
pub struct ArchiveFrames {
    pub paths: Vec<PathBuf>,
}

impl FrameSource for ArchiveFrames {
    fn frame(&self, index: usize) -> Result<RgbImage, ReidError> {
        let path = self
            .paths
            .get(index)
            .ok_or_else(|| ReidError::Io(format!("frame {index} out of range ({} frames)", self.paths.len())))?;
        Ok(image::open(path)
            .map_err(|e| ReidError::Image(format!("{}: {e}", path.display())))?
            .to_rgb8())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IdentifyParams {
    pub frames_per_segment: usize,
    pub k: usize,
    pub metric: Metric,
}

impl Default for IdentifyParams {
    fn default() -> Self {
        IdentifyParams {
            frames_per_segment: DEFAULT_FRAMES_PER_SEGMENT,
            k: DEFAULT_TOP_K,
            metric: Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuggestionRecord {
    pub recording_id: String,
    pub frame_index: usize,
    /// Ordinal of the detection within its frame.
    pub detection: usize,
    pub prediction: Prediction,
}

#[derive(Debug, Default)]
pub struct IdentifyReport {
    pub suggestions: Vec<SuggestionRecord>,
    /// Mugshots that could not be identified, with the reason.
    pub failures: Vec<(MugshotSource, String)>,
}

/// Samples frames from each segment and ranks every detected animal in them.
/// Failures are collected per animal so one bad frame does not sink the batch.
pub fn identify_segments(
    segments: &[Segment],
    frames: &dyn FrameSource,
    detections: &BTreeMap<usize, Vec<Detection>>,
    masks: &dyn MaskProvider,
    embedder: &dyn EmbeddingProvider,
    library: &ReferenceLibrary,
    params: &IdentifyParams,
) -> Result<IdentifyReport, ReidError> {
    if library.is_empty() {
        return Err(ReidError::EmptyLibrary);
    }
    if params.k == 0 {
        return Err(ReidError::InvalidK);
    }
    let mut work: Vec<(String, usize)> = segments
        .iter()
        .flat_map(|s| {
            sample_segment_frames(s.start_frame, s.end_frame, params.frames_per_segment)
                .into_iter()
                .map(move |f| (s.recording_id.clone(), f))
        })
        .filter(|(_, f)| detections.get(f).is_some_and(|d| !d.is_empty()))
        .collect();
    work.sort();
    work.dedup();

    type Outcome = Result<SuggestionRecord, (MugshotSource, String)>;
    let outcomes: Vec<Vec<Outcome>> = work
        .par_iter()
        .map(|(recording_id, frame_index)| {
            let dets = &detections[frame_index];
            let image = match frames.frame(*frame_index) {
                Ok(img) => img,
                Err(e) => {
                    return (0..dets.len())
                        .map(|d| Err((source(recording_id, *frame_index, d), e.to_string())))
                        .collect();
                }
            };
            dets.iter()
                .enumerate()
                .map(|(d, det)| {
                    let src = source(recording_id, *frame_index, d);
                    identify_one(&image, det, src.clone(), masks, embedder, library, params)
                        .map(|prediction| SuggestionRecord {
                            recording_id: recording_id.clone(),
                            frame_index: *frame_index,
                            detection: d,
                            prediction,
                        })
                        .map_err(|e| (src, e.to_string()))
                })
                .collect()
        })
        .collect();

    let mut report = IdentifyReport::default();
    for o in outcomes.into_iter().flatten() {
        match o {
            Ok(s) => report.suggestions.push(s),
            Err(f) => {
                log::warn!("re-id failed for {}: {}", f.0.key(), f.1);
                report.failures.push(f);
            }
        }
    }
    Ok(report)
}

fn source(recording_id: &str, frame_index: usize, detection: usize) -> MugshotSource {
    MugshotSource {
        recording_id: recording_id.to_string(),
        frame_index,
        detection,
    }
}

fn identify_one(
    image: &RgbImage,
    detection: &Detection,
    src: MugshotSource,
    masks: &dyn MaskProvider,
    embedder: &dyn EmbeddingProvider,
    library: &ReferenceLibrary,
    params: &IdentifyParams,
) -> Result<Prediction, ReidError> {
    let mask = masks.mask(MaskRequest {
        recording_id: &src.recording_id,
        frame_index: src.frame_index,
        detection_ordinal: src.detection,
        image,
        detection,
    })?;
    let mugshot = canonicalize_mugshot(image, &mask, src)?;
    query_topk(library, &mugshot, embedder, params.k, params.metric)
}

pub fn write_suggestions<W: io::Write>(writer: W, records: &[SuggestionRecord]) -> Result<(), ReidError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUGGESTIONS_HEADER.split(','))?;
    for r in records {
        for (rank, hit) in r.prediction.ranked.iter().enumerate() {
            w.write_record([
                r.recording_id.clone(),
                r.frame_index.to_string(),
                r.detection.to_string(),
                (rank + 1).to_string(),
                hit.individual_id.clone(),
                hit.distance.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads suggestions back, regrouping rows by `(recording, frame, detection)`
/// and ordering each prediction by rank.
pub fn read_suggestions<R: io::Read>(reader: R) -> Result<Vec<SuggestionRecord>, ReidError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = SUGGESTIONS_HEADER
        .split(',')
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| ReidError::Csv(format!("missing column {name:?}")))
        })
        .collect::<Result<_, _>>()?;
    let mut grouped: BTreeMap<(String, usize, usize), Vec<(usize, Ranked)>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(cols[i]).unwrap_or("");
        let int = |i: usize| {
            field(i)
                .parse::<usize>()
                .map_err(|_| ReidError::Csv(format!("line {line}: bad {} {:?}", SUGGESTIONS_HEADER.split(',').nth(i).unwrap(), field(i))))
        };
        let distance: f64 = field(5)
            .parse()
            .map_err(|_| ReidError::Csv(format!("line {line}: bad distance {:?}", field(5))))?;
        grouped
            .entry((field(0).to_string(), int(1)?, int(2)?))
            .or_default()
            .push((
                int(3)?,
                Ranked {
                    individual_id: field(4).to_string(),
                    distance,
                },
            ));
    }
    Ok(grouped
        .into_iter()
        .map(|((recording_id, frame_index, detection), mut ranked)| {
            ranked.sort_by_key(|(rank, _)| *rank);
            SuggestionRecord {
                recording_id,
                frame_index,
                detection,
                prediction: Prediction {
                    ranked: ranked.into_iter().map(|(_, r)| r).collect(),
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling() {
        assert_eq!(sample_segment_frames(3, 5, 5), vec![3, 4, 5]);
        assert_eq!(sample_segment_frames(0, 100, 5), vec![0, 25, 50, 75, 100]);
        assert_eq!(sample_segment_frames(10, 20, 1), vec![15]);
        assert_eq!(sample_segment_frames(0, 9, 3), vec![0, 4, 9]);
        assert!(sample_segment_frames(5, 4, 3).is_empty());
    }

    #[test]
    fn suggestions_round_trip() {
        let recs = vec![SuggestionRecord {
            recording_id: "B07-O-20210314".into(),
            frame_index: 12,
            detection: 0,
            prediction: Prediction {
                ranked: vec![
                    Ranked { individual_id: "T04".into(), distance: 0.125 },
                    Ranked { individual_id: "T11".into(), distance: 0.5 },
                ],
            },
        }];
        let mut buf = Vec::new();
        write_suggestions(&mut buf, &recs).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with(SUGGESTIONS_HEADER));
        assert_eq!(read_suggestions(buf.as_slice()).unwrap(), recs);
    }
}
