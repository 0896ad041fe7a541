//! Dataset-ownership watermark embedding and verification, plus the
//! evasion pipeline that measures how well those identifiers survive
//! transfer-set curation and selective knowledge distillation.
//!
//! The heavy inner loops (training, batch evaluation, embedding, pool
//! generation, GA fitness) run data-parallel over rayon by default; build
//! with `--no-default-features` for the sequential fallback. Results are
//! bit-identical either way.

pub mod color;
pub mod curation;
pub mod data;
pub mod distill;
pub mod dov;
pub mod embed;
pub mod error;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
