//! Individual re-identification: upright mugshots, embedding retrieval
//! against a labelled library, and library pruning.

mod batch;
mod geometry;
mod library;
mod providers;
mod query;

use thiserror::Error;

pub use batch::{
    identify_segments, read_suggestions, sample_segment_frames, write_suggestions, ArchiveFrames, FrameSource,
    IdentifyParams, IdentifyReport, SuggestionRecord, DEFAULT_FRAMES_PER_SEGMENT, SUGGESTIONS_HEADER,
};
pub use geometry::{
    canonicalize_mugshot, ellipse_mask, fold_half_turn, mask_orientation, rotate_mask, rotate_rgb, Mask, Moments,
    Mugshot, MugshotSource, CIRCULAR_AXIS_RATIO, CROP_MARGIN, MUGSHOT_SIZE,
};
pub use library::{Embedding, LibraryEntry, Metric, ReferenceLibrary, EMBEDDING_DIM};
pub use providers::{
    BoxEllipseMasks, CsvEmbeddings, EmbedRequest, EmbeddingProvider, MaskProvider, MaskRequest, PngMasks,
    SubprocessEmbedder, SyntheticEmbedder,
};
pub use query::{
    prune_library, query_topk, rank_individuals, top1_accuracy, Prediction, PruneOutcome, Ranked, ValidationQuery,
    DEFAULT_TOP_K,
};

#[derive(Debug, Error)]
pub enum ReidError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask {mask:?} does not fit image {image:?}")]
    MaskOutsideImage { mask: (u32, u32), image: (u32, u32) },
    #[error("reference library is empty")]
    EmptyLibrary,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding has {0} components, expected 32")]
    Dimension(usize),
    #[error("embedding has non-finite components")]
    NonFinite,
    #[error("embedder: {0}")]
    Embedder(String),
    #[error("validation label {0:?} is not in the library")]
    UnknownLabel(String),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("csv: {0}")]
    Csv(String),
    #[error("image: {0}")]
    Image(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<csv::Error> for ReidError {
    fn from(e: csv::Error) -> Self {
        ReidError::Csv(e.to_string())
    }
}

impl From<std::io::Error> for ReidError {
    fn from(e: std::io::Error) -> Self {
        ReidError::Io(e.to_string())
    }
}
