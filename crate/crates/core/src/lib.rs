//! Travel time estimation for taxi trips from grid sequences and
//! morphological layout images, with path-aware and path-blind query
//! answering and classical baselines.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geo;
pub mod estimation;
pub mod features;
pub mod graph;
pub mod grid;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod tiles;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
pub use grid::{CellId, GridSequence, GridSpec, GridStep};
pub use trajectory::{Corpus, Footprint, Trajectory, TripLabel};
