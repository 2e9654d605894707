//! Trace ingestion, landscape reconstruction and city layout.

pub mod api;
pub mod artificial;
pub mod assembly;
pub mod citylayout;
pub mod config;
pub mod ingest;
pub mod landscape;
pub mod loadgen;
pub mod pipeline;
pub mod span_model;
pub mod store;
