//! Camera-trap time-lapse pipeline.
//!
//! Stages, in pipeline order:
//!
//! 1. [`ingest`] copies SD-card images into a canonical archive tree.
//! 2. [`segmenter`] turns per-frame detections into draft segments.
//! 3. [`videopack`] encodes each camera-day (and a side-by-side composite) with ffmpeg.
//! 4. [`reid`] builds vertical mugshots and ranks identities against a reference library.
//! 5. [`annotation`] stores human-verified annotations as an append-only log.
//! 6. [`report`] writes CSV reports of annotations and processing status.
//!
//! [`evalkit`] scores segmentations and re-identification runs, [`schedule`]
//! estimates whether a workload beats the backlog deadline, and [`pipeline`]
//! wires the stages together.

pub mod annotation;
pub mod config;
pub mod evalkit;
pub mod ingest;
pub mod naming;
pub mod pipeline;
pub mod reid;
pub mod report;
pub mod schedule;
pub mod segmenter;
pub mod videopack;

pub use naming::{canonical_name, BurrowId, CaptureMeta, RecordingId, View};
