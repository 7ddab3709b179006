use crate::grid::CellId;
use std::path::PathBuf;

/// Errors surfaced by the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("row {row}: {reason}")]
    ParseRecord { row: usize, reason: String },

    #[error("point ({lon}, {lat}) outside the study region")]
    OutOfRegion { lon: f64, lat: f64 },

    #[error("cell ({col}, {row}) outside the grid")]
    CellOutOfBounds { col: i64, row: i64 },

    #[error("trajectory covers a single grid cell, too short to label")]
    SingleCell,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("tile {z}/{x}/{y} fetch failed: {reason}")]
    TileFetch { z: u32, x: u32, y: u32, reason: String },

    #[error("fetch failed for cell ({col}, {row}): {reason}")]
    CellFetch { col: u32, row: u32, reason: String },

    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    #[error("no neighboring trips for the queried origin/destination")]
    NoNeighbors,

    #[error("degenerate regression design: {0}")]
    Degenerate(String),

    #[error("label must be positive, got {0}")]
    NonPositiveLabel(f64),

    #[error("sequence length must be at least 2, got {0}")]
    SequenceTooShort(usize),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config error at {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("config hash mismatch: artifact {artifact} was produced under a different config (use --force to override)")]
    ConfigHashMismatch { artifact: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unknown cell {0:?}")]
    UnknownCell(CellId),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
