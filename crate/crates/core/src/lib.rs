//! Desk-scale machine reading comprehension with second-phase answer
//! confidence.
//!
//! The pipeline has two trained models. The first reads sliding windows of a
//! document paired with a question and predicts an answer of any supported
//! type (no-answer, yes/no, single span, multiple spans, long-only) plus a
//! heuristic span score. The second consumes the first model's chosen window,
//! answer markers and a 42-dimensional vector of output-head features, and
//! produces a calibrated probability that the predicted answer is correct.
//! Evaluation sweeps confidence thresholds for the optimal F1 and
//! recall-at-precision operating points, and an ensembling step merges
//! prediction files by summed confidence.
//!
//! Modules follow the pipeline order: [`corpus`] builds synthetic documents
//! and window instances, [`encoder`] is a small trained-from-scratch
//! transformer over an explicit autodiff tape ([`graph`]), [`mrc`] holds the
//! answer heads and document-level decoding, [`reflection`] the confidence
//! model, [`train`] the shared Adam loop, and [`evalkit`] the metrics.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fingerprint;
pub mod graph;
pub mod linalg;
pub mod mrc;
pub mod params;
pub mod reflection;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
