//! End-to-end batch run: ingest cards, then per burrow-day segment the
//! overhead stream, encode both views and the composite, import draft
//! segments into the annotation store and, with a library configured,
//! cache re-identification suggestions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, Utc};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::annotation::{AnnotationError, AnnotationStore, EventSchema};
use crate::config::{ConfigError, DetectorSetting, EmbedderSetting, MaskSetting, Settings};
use crate::ingest::{ingest_card, IngestError, IngestReport, ManifestProvider, MANIFEST_FILE_NAME};
use crate::naming::{BurrowId, RecordingId, View};
use crate::reid::{
    identify_segments, ArchiveFrames, BoxEllipseMasks, CsvEmbeddings, EmbeddingProvider, IdentifyParams,
    MaskProvider, PngMasks, ReferenceLibrary, SubprocessEmbedder, SyntheticEmbedder,
};
use crate::report::{Stage, StatusLog, StatusRecord};
use crate::segmenter::{
    group_detections, read_detections, read_segments, run_detection_pass, write_detections, write_segments,
    CsvDetections, Detection, ProviderError, Segment, SubprocessDetector,
    SyntheticDetector,
};
use crate::videopack::{
    align_streams, composite_file_name, compose_side_by_side, encode_day, plan_day, probe, video_file_name,
    EncodeOutcome, EncodePlan, VideoAsset,
};

pub const SEGMENTS_DIR: &str = "segments";
pub const DETECTIONS_DIR: &str = "detections";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] AnnotationError),
}

/// One SD card directory and the manifest describing its images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardSource {
    pub dir: PathBuf,
    pub manifest: PathBuf,
}

impl CardSource {
    /// Card whose manifest sits at `<dir>/manifest.csv`.
    pub fn with_default_manifest(dir: PathBuf) -> Self {
        let manifest = dir.join(MANIFEST_FILE_NAME);
        CardSource { dir, manifest }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum StageOutcome {
    Completed { items: usize, note: Option<String> },
    /// Outputs already present; nothing was touched.
    NoOp,
    Skipped(String),
    Failed(String),
}

impl StageOutcome {
    fn completed(items: usize) -> Self {
        StageOutcome::Completed { items, note: None }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, StageOutcome::Failed(_))
    }
}

impl fmt::Display for StageOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageOutcome::Completed { items, note: None } => write!(f, "completed ({items} items)"),
            StageOutcome::Completed { items, note: Some(n) } => write!(f, "completed ({items} items; {n})"),
            StageOutcome::NoOp => f.write_str("no-op"),
            StageOutcome::Skipped(why) => write!(f, "skipped: {why}"),
            StageOutcome::Failed(why) => write!(f, "FAILED: {why}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DayReport {
    pub burrow_id: BurrowId,
    pub date: NaiveDate,
    /// `(stage name, outcome)` in execution order.
    pub stages: Vec<(&'static str, StageOutcome)>,
}

impl DayReport {
    pub fn outcome(&self, stage: &str) -> Option<&StageOutcome> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, o)| o)
    }
}

#[derive(Debug)]
pub struct PipelineReport {
    pub ingest: IngestReport,
    pub days: Vec<DayReport>,
}

/// Filesystem locations shared by every stage.
#[derive(Debug, Clone)]
pub struct Layout {
    pub archive: PathBuf,
    pub videos: PathBuf,
    pub store: PathBuf,
}

impl Layout {
    pub fn from_settings(s: &Settings) -> Result<Self, ConfigError> {
        Ok(Layout {
            archive: Settings::require(&s.archive, "paths", "archive")?.to_path_buf(),
            videos: Settings::require(&s.videos, "paths", "videos")?.to_path_buf(),
            store: Settings::require(&s.store, "paths", "store")?.to_path_buf(),
        })
    }

    pub fn segments_path(&self, rec: &RecordingId) -> PathBuf {
        self.store.join(SEGMENTS_DIR).join(format!("{rec}.csv"))
    }

    pub fn detections_path(&self, rec: &RecordingId) -> PathBuf {
        self.store.join(DETECTIONS_DIR).join(format!("{rec}.csv"))
    }

    pub fn video_path(&self, rec: &RecordingId) -> PathBuf {
        self.videos.join(video_file_name(rec))
    }

    pub fn composite_path(&self, burrow: &BurrowId, date: NaiveDate) -> PathBuf {
        self.videos
            .join(composite_file_name(burrow, &date.format("%Y%m%d").to_string()))
    }
}

/// Detection provider chosen by configuration. CSV detections are looked up
/// per recording as `<dir>/<recording>.csv`.
pub enum Detector {
    Missing,
    Synthetic(SyntheticDetector),
    CsvDir(PathBuf),
    Subprocess(SubprocessDetector),
}

impl Detector {
    pub fn from_setting(setting: &DetectorSetting) -> Self {
        match setting {
            DetectorSetting::None => Detector::Missing,
            DetectorSetting::Synthetic { seed } => Detector::Synthetic(SyntheticDetector::new(*seed)),
            DetectorSetting::Csv(dir) => Detector::CsvDir(dir.clone()),
            DetectorSetting::Subprocess(cmd) => Detector::Subprocess(SubprocessDetector::spawn(&cmd[0], &cmd[1..])),
        }
    }

    fn run(&self, rec: &RecordingId, frames: &[PathBuf]) -> Result<crate::segmenter::DetectionPass, ProviderError> {
        match self {
            Detector::Missing => Err(ProviderError::Unavailable("no detection provider configured".into())),
            Detector::Synthetic(d) => run_detection_pass(frames, d),
            Detector::Subprocess(d) => run_detection_pass(frames, d),
            Detector::CsvDir(dir) => {
                let path = dir.join(format!("{rec}.csv"));
                let csv = CsvDetections::from_path(&path)
                    .map_err(|e| ProviderError::Unavailable(format!("{}: {e}", path.display())))?;
                run_detection_pass(frames, &csv)
            }
        }
    }
}

pub fn embedder_from_setting(setting: &EmbedderSetting, scratch: &Path) -> Result<Box<dyn EmbeddingProvider>, String> {
    Ok(match setting {
        EmbedderSetting::Synthetic => Box::new(SyntheticEmbedder),
        EmbedderSetting::Csv(path) => Box::new(CsvEmbeddings::from_path(path).map_err(|e| e.to_string())?),
        EmbedderSetting::Subprocess(cmd) => {
            Box::new(SubprocessEmbedder::spawn(&cmd[0], &cmd[1..], scratch.to_path_buf()))
        }
    })
}

pub fn masks_from_setting(setting: &MaskSetting) -> Box<dyn MaskProvider> {
    match setting {
        MaskSetting::BoxEllipse => Box::new(BoxEllipseMasks),
        MaskSetting::Png(dir) => Box::new(PngMasks { dir: dir.clone() }),
    }
}

fn write_atomic(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> Result<(), String>) -> Result<(), String> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    let dir = path.parent().expect("file in a directory");
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, &buf).map_err(|e| format!("{}: {e}", tmp.display()))?;
    fs::rename(&tmp, path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Which per-day stages to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSet {
    /// Detection, grouping and import into the store.
    pub segment: bool,
    pub encode: bool,
    pub reid: bool,
}

impl StageSet {
    pub fn all() -> Self {
        StageSet {
            segment: true,
            encode: true,
            reid: true,
        }
    }

    pub fn none() -> Self {
        StageSet {
            segment: false,
            encode: false,
            reid: false,
        }
    }
}

/// Burrow-days present in the archive (`{burrow}/{O|F}/{YYYYMMDD}`).
pub fn archive_days(archive: &Path) -> io::Result<BTreeSet<(BurrowId, NaiveDate)>> {
    let mut days = BTreeSet::new();
    let read = |p: &Path| -> io::Result<Vec<(String, PathBuf)>> {
        match fs::read_dir(p) {
            Ok(rd) => rd
                .map(|e| e.map(|e| (e.file_name().to_string_lossy().into_owned(), e.path())))
                .filter(|e| e.as_ref().map_or(true, |(_, p)| p.is_dir()))
                .collect(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    };
    for (burrow, bpath) in read(archive)? {
        let Ok(burrow) = BurrowId::new(burrow) else { continue };
        for (view, vpath) in read(&bpath)? {
            if View::from_code(&view).is_err() {
                continue;
            }
            for (date, _) in read(&vpath)? {
                if let Ok(date) = crate::naming::parse_date_code(&date) {
                    days.insert((burrow.clone(), date));
                }
            }
        }
    }
    Ok(days)
}

struct ReidResources {
    library: ReferenceLibrary,
    embedder: Box<dyn EmbeddingProvider>,
    masks: Box<dyn MaskProvider>,
    params: IdentifyParams,
}

/// Everything a run needs, opened once: layout, providers, the annotation
/// store and the status log. Each stage method is usable on its own.
pub struct Runner {
    settings: Settings,
    layout: Layout,
    detector: Detector,
    store: AnnotationStore,
    status: StatusLog,
    /// `Err` when a library is configured but cannot be loaded.
    reid: Option<Result<ReidResources, String>>,
}

impl Runner {
    pub fn new(settings: Settings) -> Result<Self, PipelineError> {
        let layout = Layout::from_settings(&settings)?;
        let schema = match &settings.schema {
            Some(p) => EventSchema::from_path(p)?,
            None => EventSchema::default(),
        };
        let store = AnnotationStore::open(&layout.store, schema)?;
        let status = StatusLog::new(&layout.store);
        let detector = Detector::from_setting(&settings.detector);
        let reid = settings.reid.library.as_ref().map(|path| {
            let library = fs::File::open(path)
                .map_err(|e| format!("{}: {e}", path.display()))
                .and_then(|f| ReferenceLibrary::read_csv(f).map_err(|e| format!("{}: {e}", path.display())))?;
            let embedder = embedder_from_setting(&settings.reid.embedder, &layout.store.join(".reid-scratch"))?;
            Ok(ReidResources {
                library,
                embedder,
                masks: masks_from_setting(&settings.reid.masks),
                params: IdentifyParams {
                    frames_per_segment: settings.reid.frames_per_segment,
                    k: settings.reid.top_k,
                    metric: settings.reid.metric,
                },
            })
        });
        Ok(Runner {
            settings,
            layout,
            detector,
            store,
            status,
            reid,
        })
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    pub fn plan(&self, rec: &RecordingId) -> Result<EncodePlan, String> {
        plan_day(&self.layout.archive, rec, self.settings.encode.fps)
            .map(|(p, _)| p)
            .map_err(|e| e.to_string())
    }

    fn status(&self, burrow: &BurrowId, date: NaiveDate, stage: Stage, items: usize) {
        let rec = StatusRecord {
            burrow_id: burrow.clone(),
            date,
            stage,
            items: items as u64,
            completed_utc: Utc::now(),
        };
        if let Err(e) = self.status.record(&rec) {
            log::warn!("cannot record status for {burrow}/{date}: {e}");
        }
    }

    /// Detection and grouping on the overhead camera; segments and raw
    /// detections land in the store directory.
    pub fn segment(&self, plan: &EncodePlan) -> StageOutcome {
        let rec = &plan.recording_id;
        let seg_path = self.layout.segments_path(rec);
        if seg_path.exists() {
            return StageOutcome::NoOp;
        }
        if plan.is_empty() {
            return StageOutcome::Skipped("no overhead images".into());
        }
        let pass = match self.detector.run(rec, &plan.paths()) {
            Ok(p) => p,
            Err(e) => return StageOutcome::Failed(e.to_string()),
        };
        let segments = group_detections(&pass.scans, &rec.to_string(), &self.settings.group);
        let detections = pass.detections();
        let written = write_atomic(&self.layout.detections_path(rec), |buf| {
            write_detections(buf, &detections).map_err(|e| e.to_string())
        })
        .and_then(|_| write_atomic(&seg_path, |buf| write_segments(buf, &segments).map_err(|e| e.to_string())));
        if let Err(e) = written {
            return StageOutcome::Failed(e);
        }
        let unscanned = pass.unscanned();
        StageOutcome::Completed {
            items: segments.len(),
            note: (!unscanned.is_empty()).then(|| format!("{} frames unscanned", unscanned.len())),
        }
    }

    fn encode_view(&self, plan: &EncodePlan) -> Result<(Option<VideoAsset>, bool), String> {
        let out = self.layout.video_path(&plan.recording_id);
        if out.exists() {
            match probe(&out, &self.settings.encode.encoder) {
                Ok(asset) if asset.frames == plan.len() => return Ok((Some(asset), false)),
                Ok(asset) => log::warn!(
                    "{} has {} frames but the archive has {}; re-encoding",
                    out.display(),
                    asset.frames,
                    plan.len()
                ),
                Err(e) => log::warn!("cannot probe {}: {e}; re-encoding", out.display()),
            }
        }
        match encode_day(plan, &out, &self.settings.encode.encoder).map_err(|e| e.to_string())? {
            EncodeOutcome::Encoded(a) => Ok((Some(a), true)),
            EncodeOutcome::EmptyDay => Ok((None, false)),
        }
    }

    /// Both per-view videos, then the side-by-side composite.
    pub fn encode(&self, overhead: &EncodePlan, front: &EncodePlan, burrow: &BurrowId, date: NaiveDate) -> StageOutcome {
        let mut produced = 0;
        let mut assets = Vec::new();
        for plan in [overhead, front] {
            match self.encode_view(plan) {
                Ok((asset, fresh)) => {
                    produced += fresh as usize;
                    assets.push(asset);
                }
                Err(e) => return StageOutcome::Failed(format!("{}: {e}", plan.recording_id)),
            }
        }
        if let [Some(o), Some(f)] = assets.as_slice() {
            let out = self.layout.composite_path(burrow, date);
            if !out.exists() || produced > 0 {
                let map = align_streams(overhead, front, self.settings.encode.align_tolerance);
                let e = &self.settings.encode;
                if let Err(err) = compose_side_by_side(o, f, &map, &out, e.fps, e.fill, &e.encoder) {
                    return StageOutcome::Failed(format!("composite: {err}"));
                }
                produced += 1;
            }
        }
        if produced == 0 {
            StageOutcome::NoOp
        } else {
            StageOutcome::completed(produced)
        }
    }

    pub fn import(&self, rec: &RecordingId) -> StageOutcome {
        let path = self.layout.segments_path(rec);
        let segments = match fs::File::open(&path) {
            Ok(f) => match read_segments(f) {
                Ok(s) => s,
                Err(e) => return StageOutcome::Failed(format!("{}: {e}", path.display())),
            },
            Err(e) if e.kind() == io::ErrorKind::NotFound => return StageOutcome::Skipped("no segments".into()),
            Err(e) => return StageOutcome::Failed(format!("{}: {e}", path.display())),
        };
        match self.store.import_segments(&segments, Utc::now()) {
            Ok(0) => StageOutcome::NoOp,
            Ok(n) => StageOutcome::completed(n),
            Err(e) => StageOutcome::Failed(e.to_string()),
        }
    }

    pub fn identify(&self, plan: &EncodePlan) -> StageOutcome {
        let r = match &self.reid {
            None => return StageOutcome::Skipped("no reference library configured".into()),
            Some(Err(e)) => return StageOutcome::Failed(e.clone()),
            Some(Ok(r)) => r,
        };
        let rec = &plan.recording_id;
        match self.store.load_suggestions(&rec.to_string()) {
            Ok(Some(_)) => return StageOutcome::NoOp,
            Ok(None) => {}
            Err(e) => return StageOutcome::Failed(e.to_string()),
        }
        let load = || -> Result<(Vec<Segment>, Vec<Detection>), String> {
            let seg = fs::File::open(self.layout.segments_path(rec)).map_err(|e| e.to_string())?;
            let det = fs::File::open(self.layout.detections_path(rec)).map_err(|e| e.to_string())?;
            Ok((
                read_segments(seg).map_err(|e| e.to_string())?,
                read_detections(det).map_err(|e| e.to_string())?,
            ))
        };
        let (segments, detections) = match load() {
            Ok(v) => v,
            Err(e) => return StageOutcome::Skipped(format!("segmentation outputs unavailable: {e}")),
        };
        let mut by_frame: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
        for d in detections
            .into_iter()
            .filter(|d| d.confidence >= self.settings.group.threshold)
        {
            by_frame.entry(d.frame_index).or_default().push(d);
        }
        let frames = ArchiveFrames { paths: plan.paths() };
        match identify_segments(
            &segments,
            &frames,
            &by_frame,
            r.masks.as_ref(),
            r.embedder.as_ref(),
            &r.library,
            &r.params,
        ) {
            Ok(report) => match self.store.store_suggestions(&rec.to_string(), &report.suggestions) {
                Ok(()) => StageOutcome::Completed {
                    items: report.suggestions.len(),
                    note: (!report.failures.is_empty()).then(|| format!("{} animals failed", report.failures.len())),
                },
                Err(e) => StageOutcome::Failed(e.to_string()),
            },
            Err(e) => StageOutcome::Failed(e.to_string()),
        }
    }

    pub fn run_day(&self, burrow: &BurrowId, date: NaiveDate) -> DayReport {
        self.run_day_stages(burrow, date, StageSet::all())
    }

    /// Runs the selected stages for one burrow-day. Segmentation and encoding
    /// are independent; import and re-identification need segmentation.
    pub fn run_day_stages(&self, burrow: &BurrowId, date: NaiveDate, which: StageSet) -> DayReport {
        let mut stages = Vec::new();
        let o_rec = RecordingId::new(burrow.clone(), View::Overhead, date);
        let f_rec = o_rec.with_view(View::Front);
        let plans = self.plan(&o_rec).and_then(|o| self.plan(&f_rec).map(|f| (o, f)));
        let (overhead, front) = match plans {
            Ok(p) => p,
            Err(e) => {
                stages.push(("plan", StageOutcome::Failed(e)));
                return DayReport {
                    burrow_id: burrow.clone(),
                    date,
                    stages,
                };
            }
        };
        self.status(burrow, date, Stage::Ingested, overhead.len() + front.len());

        let mut seg_ok = true;
        if which.segment {
            let seg = self.segment(&overhead);
            seg_ok = !seg.is_failure();
            stages.push(("segment", seg));
            if seg_ok {
                let imp = self.import(&o_rec);
                if !imp.is_failure() {
                    let n = self.store.for_recording(&o_rec.to_string()).len();
                    self.status(burrow, date, Stage::Segmented, n);
                }
                stages.push(("import", imp));
            } else {
                stages.push(("import", StageOutcome::Skipped("segmentation failed".into())));
            }
        }
        if which.encode {
            let enc = self.encode(&overhead, &front, burrow, date);
            if !enc.is_failure() {
                let videos = [self.layout.video_path(&o_rec), self.layout.video_path(&f_rec)]
                    .iter()
                    .filter(|p| p.exists())
                    .count();
                self.status(burrow, date, Stage::Encoded, videos);
            }
            stages.push(("encode", enc));
        }
        if which.reid {
            let outcome = if seg_ok {
                self.identify(&overhead)
            } else {
                StageOutcome::Skipped("segmentation failed".into())
            };
            stages.push(("reid", outcome));
        }
        DayReport {
            burrow_id: burrow.clone(),
            date,
            stages,
        }
    }

    /// Runs the selected stages over several days, `workers` at a time.
    pub fn run_days(&self, days: &BTreeSet<(BurrowId, NaiveDate)>, which: StageSet) -> Vec<DayReport> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.settings.workers)
            .build()
            .expect("thread pool");
        pool.install(|| {
            days.par_iter()
                .map(|(burrow, date)| self.run_day_stages(burrow, *date, which))
                .collect()
        })
    }

    /// Copies every card into the archive.
    pub fn ingest(&self, cards: &[CardSource]) -> Result<IngestReport, PipelineError> {
        let mut total = IngestReport::default();
        for card in cards {
            let provider = ManifestProvider::from_path(&card.manifest)?;
            let report = ingest_card(&card.dir, &self.layout.archive, &provider)?;
            log::info!(
                "{}: copied {}, duplicates {}, errors {}",
                card.dir.display(),
                report.copied,
                report.skipped_duplicates,
                report.errors.len()
            );
            total.merge(report);
        }
        Ok(total)
    }

    /// Ingests the cards, then processes every burrow-day they touched,
    /// up to `workers` days at a time.
    pub fn run(&self, cards: &[CardSource]) -> Result<PipelineReport, PipelineError> {
        let ingest = self.ingest(cards)?;
        let days: BTreeSet<(BurrowId, NaiveDate)> = ingest
            .recordings
            .iter()
            .map(|r| (r.burrow_id.clone(), r.date))
            .collect();
        let days = self.run_days(&days, StageSet::all());
        Ok(PipelineReport { ingest, days })
    }
}

/// Runs the whole batch. Only configuration, store and card-level ingest
/// problems abort the run; everything else is reported per burrow-day.
pub fn run_pipeline(settings: &Settings, cards: &[CardSource]) -> Result<PipelineReport, PipelineError> {
    Runner::new(settings.clone())?.run(cards)
}
