//! Training-free audio- and language-referenced video object segmentation:
//! reference unification, pivot frame and box selection, mask propagation
//! through a promptable segmenter, and J/F evaluation.

pub mod audio_seg;
pub mod audit;
pub mod backends;
pub mod batch;
pub mod config;
pub mod context;
pub mod error;
pub mod eval;
pub mod gpt_ps;
pub mod lbru;
pub mod orchestrator;
pub mod prompts;
pub mod symbolic;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
