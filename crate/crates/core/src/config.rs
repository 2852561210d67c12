//! Hand-editable `key = value` configuration with one section per stage.
//!
//! ```ini
//! [paths]
//! archive = /data/archive
//! videos = /data/videos
//! store = /data/store
//!
//! [segment]
//! provider = subprocess
//! command = python3 detect.py --weights tortoise.pt
//! threshold = 0.9
//!
//! [encode]
//! ffmpeg = /usr/bin/ffmpeg
//! workers = 4
//! ```
//!
//! Command-line flags are applied with [`Config::set`] before the typed
//! [`Settings`] are built.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::reid::{Metric, DEFAULT_FRAMES_PER_SEGMENT, DEFAULT_TOP_K};
use crate::segmenter::GroupParams;
use crate::videopack::{Encoder, FillPolicy, DEFAULT_ALIGN_TOLERANCE_SECS, DEFAULT_FPS};

pub const CONFIG_ENV: &str = "TRAPLINE_CONFIG";

/// Every accepted `(section, key)`; anything else is reported as a typo.
const KNOWN_KEYS: &[(&str, &str)] = &[
    ("paths", "archive"),
    ("paths", "videos"),
    ("paths", "store"),
    ("pipeline", "workers"),
    ("segment", "provider"),
    ("segment", "detections"),
    ("segment", "command"),
    ("segment", "seed"),
    ("segment", "threshold"),
    ("segment", "gap"),
    ("segment", "min_len"),
    ("encode", "ffmpeg"),
    ("encode", "output_args"),
    ("encode", "fps"),
    ("encode", "workers"),
    ("encode", "align_tolerance"),
    ("encode", "fill"),
    ("reid", "library"),
    ("reid", "embedder"),
    ("reid", "embeddings"),
    ("reid", "command"),
    ("reid", "masks"),
    ("reid", "mask_dir"),
    ("reid", "frames_per_segment"),
    ("reid", "top_k"),
    ("reid", "metric"),
    ("serve", "schema"),
    ("serve", "port"),
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("syntax: {0}")]
    Syntax(String),
    #[error("unknown setting [{section}] {key}")]
    UnknownKey { section: String, key: String },
    #[error("[{section}] {key}: {reason}")]
    BadValue {
        section: String,
        key: String,
        reason: String,
    },
    #[error("[{section}] {key} is required")]
    Missing { section: String, key: String },
}

/// Raw settings keyed by `(section, key)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<(String, String), String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = ini::Ini::load_from_str_noescape(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut cfg = Config::default();
        for (section, props) in &ini {
            let section = section.unwrap_or("").to_string();
            for (key, value) in props.iter() {
                if !KNOWN_KEYS.contains(&(section.as_str(), key)) {
                    return Err(ConfigError::UnknownKey {
                        section,
                        key: key.to_string(),
                    });
                }
                cfg.values.insert((section.clone(), key.to_string()), value.trim().to_string());
            }
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Loads `explicit` if given, else the file named by `TRAPLINE_CONFIG`,
    /// else an empty configuration.
    pub fn load(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit {
            Some(p) => Self::from_path(p),
            None => match std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()) {
                Some(p) => Self::from_path(Path::new(&p)),
                None => Ok(Config::default()),
            },
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    /// Overrides one setting (used for command-line flags).
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        debug_assert!(KNOWN_KEYS.contains(&(section, key)), "[{section}] {key}");
        self.values.insert((section.to_string(), key.to_string()), value.into());
    }

    /// [`Config::set`] for an optional flag.
    pub fn set_opt<V: ToString>(&mut self, section: &str, key: &str, value: Option<V>) {
        if let Some(v) = value {
            self.set(section, key, v.to_string());
        }
    }

    fn parsed<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e: T::Err| ConfigError::BadValue {
                section: section.into(),
                key: key.into(),
                reason: format!("{raw:?}: {e}"),
            }),
        }
    }

    fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.get(section, key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    fn required_path(&self, section: &str, key: &str) -> Result<PathBuf, ConfigError> {
        self.path(section, key).ok_or_else(|| ConfigError::Missing {
            section: section.into(),
            key: key.into(),
        })
    }

    fn command(&self, section: &str) -> Result<Vec<String>, ConfigError> {
        let words: Vec<String> = self
            .get(section, "command")
            .unwrap_or("")
            .split_whitespace()
            .map(String::from)
            .collect();
        if words.is_empty() {
            return Err(ConfigError::Missing {
                section: section.into(),
                key: "command".into(),
            });
        }
        Ok(words)
    }

    fn bad(section: &str, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            section: section.into(),
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn settings(&self) -> Result<Settings, ConfigError> {
        let detector = match self.get("segment", "provider").unwrap_or("none") {
            "none" | "" => DetectorSetting::None,
            "synthetic" => DetectorSetting::Synthetic {
                seed: self.parsed("segment", "seed", 0u64)?,
            },
            "csv" => DetectorSetting::Csv(self.required_path("segment", "detections")?),
            "subprocess" => DetectorSetting::Subprocess(self.command("segment")?),
            other => return Err(Self::bad("segment", "provider", format!("unknown provider {other:?}"))),
        };
        let group = GroupParams {
            threshold: self.parsed("segment", "threshold", GroupParams::default().threshold)?,
            gap: self.parsed("segment", "gap", GroupParams::default().gap)?,
            min_len: self.parsed("segment", "min_len", GroupParams::default().min_len)?,
        };
        if !(0.0..=1.0).contains(&group.threshold) {
            return Err(Self::bad("segment", "threshold", "must lie in [0, 1]"));
        }

        let mut encoder = Encoder::from_env();
        if let Some(bin) = self.path("encode", "ffmpeg") {
            encoder.binary = bin;
        }
        if let Some(args) = self.get("encode", "output_args") {
            encoder.output_args = args.split_whitespace().map(String::from).collect();
        }
        let fill = match self.get("encode", "fill").unwrap_or("repeat") {
            "repeat" => FillPolicy::RepeatLast,
            "black" => FillPolicy::Black,
            other => return Err(Self::bad("encode", "fill", format!("{other:?}: expected repeat or black"))),
        };
        let fps: u32 = self.parsed("encode", "fps", DEFAULT_FPS)?;
        if fps == 0 {
            return Err(Self::bad("encode", "fps", "must be positive"));
        }
        let align_tolerance: f64 = self.parsed("encode", "align_tolerance", DEFAULT_ALIGN_TOLERANCE_SECS)?;
        if !(align_tolerance.is_finite() && align_tolerance >= 0.0) {
            return Err(Self::bad("encode", "align_tolerance", "must be a non-negative number of seconds"));
        }

        let embedder = match self.get("reid", "embedder").unwrap_or("synthetic") {
            "synthetic" => EmbedderSetting::Synthetic,
            "csv" => EmbedderSetting::Csv(self.required_path("reid", "embeddings")?),
            "subprocess" => EmbedderSetting::Subprocess(self.command("reid")?),
            other => return Err(Self::bad("reid", "embedder", format!("unknown embedder {other:?}"))),
        };
        let masks = match self.get("reid", "masks").unwrap_or("ellipse") {
            "ellipse" => MaskSetting::BoxEllipse,
            "png" => MaskSetting::Png(self.required_path("reid", "mask_dir")?),
            other => return Err(Self::bad("reid", "masks", format!("{other:?}: expected ellipse or png"))),
        };
        let top_k: usize = self.parsed("reid", "top_k", DEFAULT_TOP_K)?;
        if top_k == 0 {
            return Err(Self::bad("reid", "top_k", "must be at least 1"));
        }

        Ok(Settings {
            archive: self.path("paths", "archive"),
            videos: self.path("paths", "videos"),
            store: self.path("paths", "store"),
            workers: self.parsed("pipeline", "workers", 1usize)?.max(1),
            detector,
            group,
            encode: EncodeSettings {
                encoder,
                fps,
                workers: self.parsed("encode", "workers", 1usize)?.max(1),
                align_tolerance,
                fill,
            },
            reid: ReidSettings {
                library: self.path("reid", "library"),
                embedder,
                masks,
                frames_per_segment: self.parsed("reid", "frames_per_segment", DEFAULT_FRAMES_PER_SEGMENT)?,
                top_k,
                metric: self.parsed("reid", "metric", Metric::Euclidean)?,
            },
            schema: self.path("serve", "schema"),
            port: self.parsed("serve", "port", 8080u16)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectorSetting {
    /// No provider configured; the segmentation stage fails for every day.
    None,
    Synthetic { seed: u64 },
    Csv(PathBuf),
    Subprocess(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedderSetting {
    Synthetic,
    Csv(PathBuf),
    Subprocess(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskSetting {
    BoxEllipse,
    Png(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeSettings {
    pub encoder: Encoder,
    pub fps: u32,
    pub workers: usize,
    pub align_tolerance: f64,
    pub fill: FillPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReidSettings {
    /// Re-identification runs only when a library is configured.
    pub library: Option<PathBuf>,
    pub embedder: EmbedderSetting,
    pub masks: MaskSetting,
    pub frames_per_segment: usize,
    pub top_k: usize,
    pub metric: Metric,
}

/// Typed view of a [`Config`].
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub archive: Option<PathBuf>,
    pub videos: Option<PathBuf>,
    pub store: Option<PathBuf>,
    /// Burrow-days processed concurrently.
    pub workers: usize,
    pub detector: DetectorSetting,
    pub group: GroupParams,
    pub encode: EncodeSettings,
    pub reid: ReidSettings,
    pub schema: Option<PathBuf>,
    pub port: u16,
}

impl Settings {
    pub fn require<'a>(value: &'a Option<PathBuf>, section: &str, key: &str) -> Result<&'a Path, ConfigError> {
        value.as_deref().ok_or_else(|| ConfigError::Missing {
            section: section.into(),
            key: key.into(),
        })
    }
}
