//! Capture identity and the canonical archive naming scheme.
//!
//! Every archived image is named `{burrow}-{V}-{YYYYMMDD}-{HHMMSS}.jpg` and
//! every camera-day recording is identified as `{burrow}-{V}-{YYYYMMDD}`.
//! Both forms are fixed-width after the burrow token, so lexical order within
//! one recording equals capture order.

use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Start of the daily capture schedule (inclusive).
pub const SCHEDULE_START: NaiveTime = match NaiveTime::from_hms_opt(7, 0, 0) {
    Some(t) => t,
    None => unreachable!(),
};
/// End of the daily capture schedule (inclusive).
pub const SCHEDULE_END: NaiveTime = match NaiveTime::from_hms_opt(20, 0, 0) {
    Some(t) => t,
    None => unreachable!(),
};
/// Seconds between consecutive time-lapse captures.
pub const CAPTURE_CADENCE_SECS: i64 = 5;

const TIMESTAMP_FORMAT: &str = "%Y%m%d-%H%M%S";
const DATE_FORMAT: &str = "%Y%m%d";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NameError {
    #[error("invalid burrow id {0:?}")]
    InvalidBurrow(String),
    #[error("invalid view code {0:?}")]
    InvalidView(String),
    #[error("invalid date {0:?}")]
    InvalidDate(String),
    #[error("not a canonical image name: {0:?}")]
    NotCanonical(String),
}

/// Camera viewpoint at a burrow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum View {
    Overhead,
    Front,
}

impl View {
    pub fn code(self) -> char {
        match self {
            View::Overhead => 'O',
            View::Front => 'F',
        }
    }

    pub fn from_code(code: &str) -> Result<Self, NameError> {
        match code {
            "O" | "o" => Ok(View::Overhead),
            "F" | "f" => Ok(View::Front),
            other => Err(NameError::InvalidView(other.to_string())),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// Short alphanumeric burrow token such as `B07`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BurrowId(String);

impl BurrowId {
    pub fn new(id: impl Into<String>) -> Result<Self, NameError> {
        let id = id.into();
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric());
        if valid {
            Ok(BurrowId(id))
        } else {
            Err(NameError::InvalidBurrow(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for BurrowId {
    type Error = NameError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        BurrowId::new(value)
    }
}

impl From<BurrowId> for String {
    fn from(value: BurrowId) -> Self {
        value.0
    }
}

impl fmt::Display for BurrowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identity of one captured image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CaptureMeta {
    pub burrow_id: BurrowId,
    pub view: View,
    /// Local camera time, second resolution.
    pub timestamp: NaiveDateTime,
}

impl CaptureMeta {
    pub fn new(burrow_id: BurrowId, view: View, timestamp: NaiveDateTime) -> Self {
        // Sub-second parts carry no information at a 5 s cadence.
        let timestamp = timestamp.with_nanosecond(0).unwrap_or(timestamp);
        CaptureMeta { burrow_id, view, timestamp }
    }

    /// True when the capture time lies inside the 07:00–20:00 daylight schedule.
    pub fn in_schedule(&self) -> bool {
        let t = self.timestamp.time();
        t >= SCHEDULE_START && t <= SCHEDULE_END
    }

    pub fn recording_id(&self) -> RecordingId {
        RecordingId {
            burrow_id: self.burrow_id.clone(),
            view: self.view,
            date: self.timestamp.date(),
        }
    }
}

/// `{burrow}-{V}-{YYYYMMDD}-{HHMMSS}.jpg`
pub fn canonical_name(meta: &CaptureMeta) -> String {
    format!(
        "{}-{}-{}.jpg",
        meta.burrow_id,
        meta.view.code(),
        meta.timestamp.format(TIMESTAMP_FORMAT)
    )
}

/// Inverse of [`canonical_name`]. Accepts `.jpg` in any letter case.
pub fn parse_canonical_name(name: &str) -> Result<CaptureMeta, NameError> {
    let not_canonical = || NameError::NotCanonical(name.to_string());
    let stem = name
        .len()
        .checked_sub(4)
        .filter(|&i| name.is_char_boundary(i) && name[i..].eq_ignore_ascii_case(".jpg"))
        .map(|i| &name[..i])
        .ok_or_else(not_canonical)?;
    let mut parts = stem.splitn(3, '-');
    let (burrow, view, stamp) = match (parts.next(), parts.next(), parts.next()) {
        (Some(b), Some(v), Some(s)) => (b, v, s),
        _ => return Err(not_canonical()),
    };
    if stamp.len() != 15 {
        return Err(not_canonical());
    }
    let timestamp =
        NaiveDateTime::parse_from_str(stamp, TIMESTAMP_FORMAT).map_err(|_| not_canonical())?;
    let burrow_id = BurrowId::new(burrow).map_err(|_| not_canonical())?;
    let view = View::from_code(view).map_err(|_| not_canonical())?;
    Ok(CaptureMeta::new(burrow_id, view, timestamp))
}

/// One camera-day: `{burrow}-{V}-{YYYYMMDD}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordingId {
    pub burrow_id: BurrowId,
    pub view: View,
    pub date: NaiveDate,
}

impl RecordingId {
    pub fn new(burrow_id: BurrowId, view: View, date: NaiveDate) -> Self {
        RecordingId { burrow_id, view, date }
    }

    pub fn date_code(&self) -> String {
        self.date.format(DATE_FORMAT).to_string()
    }

    /// Archive directory relative to the archive root: `{burrow}/{V}/{YYYYMMDD}`.
    pub fn archive_dir(&self) -> std::path::PathBuf {
        [
            self.burrow_id.as_str(),
            &self.view.code().to_string(),
            &self.date_code(),
        ]
        .iter()
        .collect()
    }

    /// The same burrow-day seen from the other camera.
    pub fn with_view(&self, view: View) -> Self {
        RecordingId { view, ..self.clone() }
    }
}

impl fmt::Display for RecordingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.burrow_id, self.view.code(), self.date_code())
    }
}

impl FromStr for RecordingId {
    type Err = NameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.splitn(3, '-');
        let (burrow, view, date) = match (parts.next(), parts.next(), parts.next()) {
            (Some(b), Some(v), Some(d)) => (b, v, d),
            _ => return Err(NameError::NotCanonical(s.to_string())),
        };
        Ok(RecordingId {
            burrow_id: BurrowId::new(burrow)?,
            view: View::from_code(view)?,
            date: parse_date_code(date)?,
        })
    }
}

/// Parses `YYYYMMDD`.
pub fn parse_date_code(code: &str) -> Result<NaiveDate, NameError> {
    if code.len() != 8 {
        return Err(NameError::InvalidDate(code.to_string()));
    }
    NaiveDate::parse_from_str(code, DATE_FORMAT).map_err(|_| NameError::InvalidDate(code.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").unwrap()
    }

    fn meta(burrow: &str, view: View, t: &str) -> CaptureMeta {
        CaptureMeta::new(BurrowId::new(burrow).unwrap(), view, ts(t))
    }

    #[test]
    fn canonical_names() {
        assert_eq!(
            canonical_name(&meta("B07", View::Overhead, "2021-03-14 09:15:05")),
            "B07-O-20210314-091505.jpg"
        );
        assert_eq!(
            canonical_name(&meta("B07", View::Front, "2021-03-14 09:15:05")),
            "B07-F-20210314-091505.jpg"
        );
        assert_ne!(
            canonical_name(&meta("B07", View::Front, "2021-03-14 09:15:05")),
            canonical_name(&meta("B07", View::Front, "2021-03-14 09:15:06"))
        );
    }

    #[test]
    fn burrow_rejects_separators() {
        assert!(BurrowId::new("B-7").is_err());
        assert!(BurrowId::new("B/7").is_err());
        assert!(BurrowId::new("").is_err());
        assert!(BurrowId::new("B07").is_ok());
    }

    #[test]
    fn schedule_flag() {
        assert!(meta("B07", View::Overhead, "2021-03-14 07:00:00").in_schedule());
        assert!(meta("B07", View::Overhead, "2021-03-14 20:00:00").in_schedule());
        assert!(!meta("B07", View::Overhead, "2021-03-14 22:00:00").in_schedule());
        assert!(!meta("B07", View::Overhead, "2021-03-14 06:59:59").in_schedule());
    }

    #[test]
    fn recording_id_round_trip() {
        let id: RecordingId = "B07-O-20210314".parse().unwrap();
        assert_eq!(id.to_string(), "B07-O-20210314");
        assert_eq!(id.archive_dir(), std::path::PathBuf::from("B07/O/20210314"));
        assert!("B07-X-20210314".parse::<RecordingId>().is_err());
        assert!("B07-O-2021031".parse::<RecordingId>().is_err());
    }

    #[test]
    fn rejects_non_canonical_names() {
        for bad in ["IMG_0001.JPG", "B07-O-20210314.jpg", "B07-O-20210314-251505.jpg", "B07-Q-20210314-091505.jpg"] {
            assert!(parse_canonical_name(bad).is_err(), "{bad}");
        }
    }

    fn arb_meta() -> impl Strategy<Value = CaptureMeta> {
        (
            "[A-Za-z0-9]{1,6}",
            prop_oneof![Just(View::Overhead), Just(View::Front)],
            0i64..(3 * 365 * 86_400),
        )
            .prop_map(|(b, v, secs)| {
                let t = ts("2020-11-01 00:00:00") + chrono::Duration::seconds(secs);
                CaptureMeta::new(BurrowId::new(b).unwrap(), v, t)
            })
    }

    proptest! {
        #[test]
        fn canonical_name_is_injective(a in arb_meta(), b in arb_meta()) {
            prop_assert_eq!(a == b, canonical_name(&a) == canonical_name(&b));
        }

        #[test]
        fn canonical_name_parses_back(a in arb_meta()) {
            prop_assert_eq!(parse_canonical_name(&canonical_name(&a)).unwrap(), a);
        }
    }
}
