//! Core library for the peer-counselor feedback pipeline: data model,
//! ingestion, segmentation, model gateway, annotation, self-improvement and
//! evaluation.

pub mod gateway;
pub mod grammar;
pub mod ingest;
pub mod io;
pub mod model;
pub mod prompts;
pub mod segmenter;
pub mod annotator;
pub mod selfimprove;
pub mod eval;
