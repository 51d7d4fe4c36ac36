//! Verse-level authorship attribution for classical Persian poetry.
//!
//! The pipeline normalizes verse text, derives stylometric and structural
//! features, trains skip-gram embeddings and a small transformer encoder, and
//! fuses everything into a class-weighted classifier. Poem-level predictions
//! come from majority, probability-weighted or thresholded voting.

pub mod aggregate;
pub mod corpus;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod normalize;
pub mod pipeline;
pub mod split;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
