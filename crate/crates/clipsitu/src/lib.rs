//! Grounded situation recognition toolkit.
//!
//! Predicts the activity (verb) shown in an image, the nouns filling each of
//! the verb's semantic roles, and a bounding box locating each noun; extends
//! the same model family to 5-event video situation recognition with an
//! autoregressive sequence decoder. Models run on pooled and patch-level
//! embeddings from a pluggable provider: a deterministic synthetic provider
//! is bundled for desk-scale training and verification, and the provider
//! contract lets precomputed encoder features drop in for real data.

pub mod embeddings;
pub mod error;
pub mod graph;
pub mod harness;
pub mod heads;
pub mod mat;
pub mod metrics;
pub mod objectives;
pub mod ontology;
pub mod srl;
pub mod video;

pub use error::{Error, Result};
pub use mat::Mat;
