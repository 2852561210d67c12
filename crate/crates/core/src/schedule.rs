//! Makespan estimate for one batch of SD cards against the backlog deadline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two days of captures must be cleared before the next cards come in.
pub const BACKLOG_DEADLINE_HOURS: f64 = 48.0;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("{0} must be a positive finite rate")]
    BadRate(&'static str),
    #[error("{0} must be finite and non-negative")]
    BadQuantity(&'static str),
    #[error("{0} workers must be at least 1")]
    NoWorkers(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub burrows: u32,
    pub days_per_batch: u32,
    /// Images on one overhead card; these are segmented.
    pub overhead_images: u64,
    /// Images on one front card; these are only copied.
    pub front_images: u64,
    /// Detection throughput, images/s.
    pub segmentation_rate: f64,
    /// Download and rename throughput, images/s.
    pub copy_rate: f64,
    /// Encoding time for all videos of one burrow-day.
    pub compression_minutes: f64,
}

impl WorkloadSpec {
    /// The field deployment: 12 burrows, two-day cards of 20,000 images,
    /// 10 images/s detection, 30 images/s copying, 34 minutes of encoding
    /// per burrow-day.
    pub fn field_deployment() -> Self {
        WorkloadSpec {
            burrows: 12,
            days_per_batch: 2,
            overhead_images: 20_000,
            front_images: 20_000,
            segmentation_rate: 10.0,
            copy_rate: 30.0,
            compression_minutes: 34.0,
        }
    }

    fn validate(&self) -> Result<(), ScheduleError> {
        for (name, rate) in [("segmentation_rate", self.segmentation_rate), ("copy_rate", self.copy_rate)] {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(ScheduleError::BadRate(name));
            }
        }
        if !(self.compression_minutes.is_finite() && self.compression_minutes >= 0.0) {
            return Err(ScheduleError::BadQuantity("compression_minutes"));
        }
        Ok(())
    }
}

/// Parallel workers per stage; the field setup is one of each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageWorkers {
    pub segmentation: u32,
    pub copy: u32,
    pub compression: u32,
}

impl Default for StageWorkers {
    fn default() -> Self {
        StageWorkers {
            segmentation: 1,
            copy: 1,
            compression: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleEstimate {
    pub segmentation_hours: f64,
    pub copy_hours: f64,
    pub compression_hours: f64,
    pub makespan_hours: f64,
    pub deadline_hours: f64,
    pub meets_deadline: bool,
}

/// Stages run back to back; each stage's work divides evenly over its workers.
pub fn estimate_schedule(w: &WorkloadSpec, workers: &StageWorkers) -> Result<ScheduleEstimate, ScheduleError> {
    w.validate()?;
    for (name, n) in [
        ("segmentation", workers.segmentation),
        ("copy", workers.copy),
        ("compression", workers.compression),
    ] {
        if n == 0 {
            return Err(ScheduleError::NoWorkers(name));
        }
    }
    let burrows = w.burrows as f64;
    let segmentation_hours =
        burrows * w.overhead_images as f64 / w.segmentation_rate / 3600.0 / workers.segmentation as f64;
    let copy_hours = burrows * w.front_images as f64 / w.copy_rate / 3600.0 / workers.copy as f64;
    let compression_hours =
        burrows * w.days_per_batch as f64 * w.compression_minutes / 60.0 / workers.compression as f64;
    let makespan_hours = segmentation_hours + copy_hours + compression_hours;
    Ok(ScheduleEstimate {
        segmentation_hours,
        copy_hours,
        compression_hours,
        makespan_hours,
        deadline_hours: BACKLOG_DEADLINE_HOURS,
        meets_deadline: makespan_hours <= BACKLOG_DEADLINE_HOURS,
    })
}
