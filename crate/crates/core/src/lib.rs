//! Speaker diarization backend toolkit.
//!
//! Turns a sequence of per-segment speaker embeddings into speaker-labelled
//! time regions. The flow is
//!
//! ```text
//! embeddings -> similarity matrix -> enhancement -> clustering -> annotation
//! ```
//!
//! with three interchangeable similarity scorers ([`scoring::ScorerKind`]):
//! cosine, two-covariance PLDA, and a stacked bidirectional LSTM that predicts
//! whole rows of the similarity matrix from pair-concatenated embedding
//! sequences ([`neural`]). Clustering is spectral ([`cluster::spectral_cluster`])
//! or agglomerative ([`cluster::ahc`]); [`eval`] scores hypotheses with the
//! diarization error rate. [`synth`] generates conversations with known ground
//! truth so the whole chain can be exercised without audio.

pub mod cluster;
pub mod domain;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod io;
pub mod neural;
pub mod pipeline;
pub mod scoring;
pub mod segmentation;
pub mod synth;

mod par;

pub use domain::{Annotation, EmbeddingSequence, Region, Segment, SimilarityMatrix};
pub use error::{Error, Result};
